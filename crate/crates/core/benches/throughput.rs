//! Parallel versus sequential execution of the data-parallel hot paths.
//!
//! Each group runs the same workload with the runtime switch on and off; the
//! outputs are identical in both modes, only wall time differs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use prunequbo::anneal::{anneal, brute_force, AnnealConfig};
use prunequbo::capacity::CapacitySearchConfig;
use prunequbo::exec;
use prunequbo::objective::ObjectiveHandle;
use prunequbo::problem::{synth_problem, PruningMask};
use prunequbo::qubo::{assemble_qubo, CoefficientSet, QuboMatrix, Variant};
use prunequbo::refine::{refine, RefineConfig};
use prunequbo::rng::stream;
use prunequbo::search::{random_search, SearchConfig, SearchSpace};

const MODES: [(&str, bool); 2] = [("parallel", true), ("sequential", false)];

fn random_qubo(n: usize) -> QuboMatrix {
    let mut rng = stream(1, "bench-qubo", n as u64);
    let diag = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut upper = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            upper.push((i, j, rng.random_range(-1.0..1.0)));
        }
    }
    QuboMatrix::from_parts(diag, &upper).unwrap()
}

fn bench_anneal(c: &mut Criterion) {
    let mut group = c.benchmark_group("anneal");
    group.sample_size(10);
    let q = random_qubo(128);
    let config = AnnealConfig {
        num_reads: 32,
        sweeps_per_read: 200,
        ..AnnealConfig::default()
    };
    for (mode, parallel) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(BenchmarkId::new(mode, "n128_r32"), |b| {
            b.iter(|| anneal(black_box(&q), &config).unwrap())
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn bench_brute_force(c: &mut Criterion) {
    let mut group = c.benchmark_group("brute_force");
    group.sample_size(10);
    let q = random_qubo(20);
    for (mode, parallel) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(BenchmarkId::new(mode, "n20"), |b| {
            b.iter(|| brute_force(black_box(&q)).unwrap())
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn bench_refine(c: &mut Criterion) {
    let mut group = c.benchmark_group("refine");
    group.sample_size(10);
    let q = random_qubo(64);
    let seed = PruningMask::from_bits((0..64).map(|i| u8::from(i < 16)).collect()).unwrap();
    let config = RefineConfig {
        budget: 1500,
        ..RefineConfig::default()
    };
    for (mode, parallel) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(BenchmarkId::new(mode, "n64_m1500"), |b| {
            b.iter(|| {
                let objective = ObjectiveHandle::qubo_energy(q.clone());
                refine(black_box(&seed), &objective, 16, &config).unwrap()
            })
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn bench_search(c: &mut Criterion) {
    let mut group = c.benchmark_group("random_search");
    group.sample_size(10);
    let problem = synth_problem(48, 4, 3).unwrap();
    let evaluator = ObjectiveHandle::qubo_energy(
        assemble_qubo(&problem, &CoefficientSet::default(), Variant::Hybrid).unwrap(),
    );
    let config = SearchConfig {
        n_trials: 8,
        capacity: CapacitySearchConfig {
            reads_search: 8,
            reads_final: 16,
            ..CapacitySearchConfig::new(12)
        },
        anneal: AnnealConfig {
            sweeps_per_read: 200,
            ..AnnealConfig::default()
        },
        seed: 123,
    };
    for (mode, parallel) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(BenchmarkId::new(mode, "n48_t8"), |b| {
            b.iter(|| {
                random_search(
                    &problem,
                    Variant::Hybrid,
                    &SearchSpace::default(),
                    12,
                    &config,
                    &evaluator,
                )
                .unwrap()
            })
        });
    }
    exec::set_parallel(true);
    group.finish();
}

criterion_group!(
    benches,
    bench_anneal,
    bench_brute_force,
    bench_refine,
    bench_search
);
criterion_main!(benches);
