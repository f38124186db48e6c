//! Independent oracles for QUBO assembly, normalization and energies.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;
use rand::Rng;

use prunequbo::problem::{
    load_problem, save_problem, synth_problem, FilterRecord, PruningMask, PruningProblem,
};
use prunequbo::qubo::{
    assemble_qubo, cap_spectral_norm, capacity_fractions, delta_energy, energy,
    normalize_components, outer_redundancy, std_dev, CoefficientSet, QuboMatrix, SymMatrix,
    Variant, DEFAULT_EPS,
};
use prunequbo::rng::stream;

fn random_qubo(rng: &mut impl Rng, n: usize) -> QuboMatrix {
    let diag = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut upper = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            upper.push((i, j, rng.random_range(-2.0..2.0)));
        }
    }
    QuboMatrix::from_parts(diag, &upper).unwrap()
}

fn random_mask(rng: &mut impl Rng, n: usize) -> PruningMask {
    PruningMask::from_bits((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap()
}

/// `pᵀ M p` with `M_ii = Q_ii` and `M_ij = M_ji = Q_ij / 2`.
fn dense_energy(q: &QuboMatrix, p: &PruningMask) -> f64 {
    let n = q.n();
    let m = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            q.diag()[i]
        } else {
            q.coupling(i, j) / 2.0
        }
    });
    let v = DVector::from_iterator(n, p.bits().iter().map(|&b| f64::from(b)));
    (v.transpose() * m * v)[(0, 0)]
}

fn spectral_norm(m: &SymMatrix) -> f64 {
    let dense = DMatrix::from_row_slice(m.n(), m.n(), m.data());
    SymmetricEigen::new(dense)
        .eigenvalues
        .iter()
        .fold(0.0, |a: f64, v| a.max(v.abs()))
}

fn two_filter_problem(l1: [f64; 2], param_counts: [u64; 2]) -> PruningProblem {
    let filters = (0..2)
        .map(|i| FilterRecord {
            id: i,
            layer: 0,
            param_count: param_counts[i],
            l1_score: l1[i],
            taylor_score: 1.0 + i as f64,
            fisher_w_score: None,
            fisher_c_score: None,
        })
        .collect();
    PruningProblem::new(filters, Vec::new(), BTreeMap::new()).unwrap()
}

#[test]
fn capacity_fractions_sum_to_one() {
    for seed in 0..50 {
        let p = synth_problem(8 + seed as usize * 7, 4, seed).unwrap();
        let d = capacity_fractions(&p);
        assert!((d.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn redundancy_matches_double_loop() {
    let mut rng = stream(1, "redundancy", 0);
    let scores: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..5.0)).collect();
    let a = outer_redundancy(&scores);
    for i in 0..10 {
        for j in 0..10 {
            assert_eq!(a.get(i, j), scores[i] * scores[j]);
        }
    }
}

#[test]
fn scaled_importance_has_unit_spread() {
    let mut rng = stream(2, "spread", 0);
    let n = 20;
    let importance: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
    let counts: Vec<f64> = (0..n).map(|_| rng.random_range(1..500) as f64).collect();
    let total: f64 = counts.iter().sum();
    let capacity: Vec<f64> = counts.iter().map(|c| c / total).collect();
    let l1: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..2.0)).collect();
    let norm = normalize_components(
        &outer_redundancy(&l1),
        &importance,
        &capacity,
        &counts,
        DEFAULT_EPS,
    );
    let magnitudes = |v: &[f64]| v.iter().map(|x| x.abs()).collect::<Vec<_>>();
    assert!((std_dev(&magnitudes(&norm.importance_hat)) - 1.0).abs() <= 1e-6);
    assert!((std_dev(&magnitudes(&norm.capacity_hat)) - 1.0).abs() <= 1e-6);
    assert!((std_dev(&magnitudes(&norm.a_hat.diagonal())) - 1.0).abs() <= 1e-6);
    assert!(norm.degenerate.is_empty());
}

#[test]
fn cap_bounds_exact_spectral_norm() {
    for t in 0..40 {
        let mut rng = stream(3, "cap", t);
        let n = 15;
        let mut m = SymMatrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                m.set_sym(i, j, rng.random_range(-2.0..2.0));
            }
        }
        let capped = cap_spectral_norm(&m, 100, 1e-8);
        let s = spectral_norm(&capped.matrix);
        assert!(s <= 1.0 + 1e-6, "instance {t}: {s} {:?}", capped.estimate);
    }
}

#[test]
fn two_filter_classic_follows_the_normalization_chain() {
    let p = two_filter_problem([1.0, 2.0], [1, 1]);
    let q = assemble_qubo(&p, &CoefficientSet::default(), Variant::ClassicL1).unwrap();
    // A = [[1, 2], [2, 4]]; the diagonal [1, 4] has magnitude spread 1.5;
    // the lone off-diagonal value has zero spread and is divided by eps
    let pre = DMatrix::from_row_slice(
        2,
        2,
        &[
            1.0 / (1.5 + DEFAULT_EPS),
            2.0 / DEFAULT_EPS,
            2.0 / DEFAULT_EPS,
            4.0 / (1.5 + DEFAULT_EPS),
        ],
    );
    let sigma = SymmetricEigen::new(pre.clone())
        .eigenvalues
        .iter()
        .fold(0.0, |a: f64, v| a.max(v.abs()));
    let a_hat = pre / sigma;
    let rel = |x: f64, y: f64| (x - y).abs() <= 1e-9 * y.abs().max(1e-300);
    assert!(rel(q.diag()[0], a_hat[(0, 0)]));
    assert!(rel(q.diag()[1], a_hat[(1, 1)]));
    assert!(rel(q.coupling(0, 1), 2.0 * a_hat[(0, 1)]));
}

#[test]
fn energy_matches_dense_quadratic_form() {
    for t in 0..50 {
        let mut rng = stream(4, "energy", t);
        let q = random_qubo(&mut rng, 12);
        let p = random_mask(&mut rng, 12);
        let e = energy(&q, &p).unwrap();
        assert!((e - dense_energy(&q, &p)).abs() <= 1e-10 * e.abs().max(1.0));
    }
}

#[test]
fn unit_masks_pick_the_diagonal() {
    let mut rng = stream(5, "unit", 0);
    let q = random_qubo(&mut rng, 9);
    assert_eq!(energy(&q, &PruningMask::zeros(9)).unwrap(), 0.0);
    for k in 0..9 {
        let mut m = PruningMask::zeros(9);
        m.set(k, true);
        assert_eq!(energy(&q, &m).unwrap(), q.diag()[k]);
        assert_eq!(
            delta_energy(&q, &PruningMask::zeros(9), k).unwrap(),
            q.diag()[k]
        );
    }
}

#[test]
fn reloaded_export_reproduces_energies() {
    let problem = synth_problem(30, 3, 9).unwrap();
    let coeffs = CoefficientSet {
        gamma: 0.7,
        ..CoefficientSet::default()
    };
    let q = assemble_qubo(&problem, &coeffs, Variant::Hybrid).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.json");
    q.save_export(&path).unwrap();
    let back = QuboMatrix::load_export(&path).unwrap();
    let mut rng = stream(6, "export", 0);
    for _ in 0..100 {
        let m = random_mask(&mut rng, 30);
        assert_eq!(energy(&back, &m).unwrap(), energy(&q, &m).unwrap());
    }
}

#[test]
fn synthetic_similarity_blocks_are_correlation_matrices() {
    let p = synth_problem(16, 4, 7).unwrap();
    assert_eq!(p, synth_problem(16, 4, 7).unwrap());
    assert_eq!(p.similarity().len(), 4);
    for block in p.similarity() {
        let n = block.dim();
        let m = DMatrix::from_fn(n, n, |i, j| block.matrix[i][j]);
        for i in 0..n {
            assert_eq!(m[(i, i)], 1.0);
            for j in 0..n {
                assert_eq!(m[(i, j)], m[(j, i)]);
                assert!((-1.0..=1.0).contains(&m[(i, j)]));
            }
        }
        let min_eig = SymmetricEigen::new(m)
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, v| a.min(*v));
        assert!(min_eig >= -1e-9, "smallest eigenvalue {min_eig}");
    }
}

#[test]
fn problem_file_round_trip() {
    let p = synth_problem(64, 4, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("problem.json");
    save_problem(&p, &path).unwrap();
    let back = load_problem(&path).unwrap();
    assert_eq!(back.filters(), p.filters());
    assert_eq!(back.similarity(), p.similarity());
    assert_eq!(back.metadata(), p.metadata());
    assert_eq!(back, p);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn delta_matches_full_recomputation(seed in any::<u64>(), n in 1usize..16, flip in any::<prop::sample::Index>()) {
        let mut rng = stream(seed, "delta", 0);
        let q = random_qubo(&mut rng, n);
        let p = random_mask(&mut rng, n);
        let i = flip.index(n);
        let d = delta_energy(&q, &p, i).unwrap();
        let full = energy(&q, &p.flipped(i)).unwrap() - energy(&q, &p).unwrap();
        prop_assert!((d - full).abs() <= 1e-10 * full.abs().max(1.0));
        let back = delta_energy(&q, &p.flipped(i), i).unwrap();
        prop_assert!((d + back).abs() <= 1e-12 * d.abs().max(1.0));
    }

    #[test]
    fn gamma_only_moves_the_diagonal(seed in 0u64..1000, gamma in 0.0f64..50.0) {
        let p = synth_problem(12, 3, seed).unwrap();
        let base = assemble_qubo(&p, &CoefficientSet::default(), Variant::GradientAware).unwrap();
        let fresh = assemble_qubo(&p, &CoefficientSet { gamma, ..CoefficientSet::default() }, Variant::GradientAware).unwrap();
        let swapped = base.with_gamma(gamma).unwrap();
        prop_assert_eq!(swapped.diag(), fresh.diag());
        prop_assert_eq!(swapped.upper_entries(), fresh.upper_entries());
    }
}
