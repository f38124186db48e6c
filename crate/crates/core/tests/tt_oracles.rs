//! Tensor-train distribution checked against dense contraction, sampling
//! frequencies and finite differences.

use proptest::prelude::*;
use rand::Rng;

use prunequbo::problem::PruningMask;
use prunequbo::rng::stream;
use prunequbo::tt::{update_elites, AdamState, Core, TtDistribution};

fn random_cores(n: usize, rank: usize, seed: u64) -> TtDistribution {
    let mut rng = stream(seed, "tt-cores", 0);
    let cores = (0..n)
        .map(|k| {
            let left = if k == 0 { 1 } else { rank };
            let right = if k == n - 1 { 1 } else { rank };
            let mut c = Core::zeros(left, right);
            for v in c.data.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            c
        })
        .collect();
    TtDistribution::from_cores(cores).unwrap()
}

fn all_masks(n: usize) -> Vec<PruningMask> {
    (0..1u32 << n)
        .map(|code| {
            PruningMask::from_bits((0..n).map(|i| ((code >> i) & 1) as u8).collect()).unwrap()
        })
        .collect()
}

/// Dense tensor `g[x1, x2, x3]` built with explicit index loops.
fn dense_three(dist: &TtDistribution) -> [[[f64; 2]; 2]; 2] {
    let [c1, c2, c3] = dist.cores() else {
        panic!("expected three cores")
    };
    let r = dist.rank();
    let mut g = [[[0.0; 2]; 2]; 2];
    for x1 in 0..2 {
        for x2 in 0..2 {
            for x3 in 0..2 {
                let mut s = 0.0;
                for a in 0..r {
                    for b in 0..r {
                        s += c1.at(0, x1, a) * c2.at(a, x2, b) * c3.at(b, x3, 0);
                    }
                }
                g[x1][x2][x3] = s;
            }
        }
    }
    g
}

#[test]
fn three_site_train_matches_dense_tensor() {
    for seed in 0..20 {
        let dist = random_cores(3, 2, seed);
        let g = dense_three(&dist);
        let mut z = 0.0;
        for m in all_masks(3) {
            let b = m.bits();
            let dense = g[b[0] as usize][b[1] as usize][b[2] as usize];
            assert!((dist.amplitude(&m).unwrap() - dense).abs() <= 1e-12);
            z += dense * dense;
        }
        assert!((dist.normalizer() - z).abs() <= 1e-12 * z);
        let total: f64 = all_masks(3).iter().map(|m| dist.prob(m).unwrap()).sum();
        assert!((total - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn conditionals_multiply_to_the_joint() {
    let dist = random_cores(7, 3, 4);
    for m in all_masks(7).iter().step_by(5) {
        let cond = dist.conditionals(m).unwrap();
        let chain: f64 = cond
            .iter()
            .zip(m.bits())
            .map(|(c, &b)| c[b as usize])
            .product();
        let joint = dist.prob(m).unwrap();
        assert!((chain - joint).abs() <= 1e-10 * joint.max(1e-12));
    }
}

fn bit_frequencies(dist: &TtDistribution, eps: f64, samples: usize, seed: u64) -> Vec<f64> {
    let right = dist.right_environments();
    let mut rng = stream(seed, "freq", 0);
    let mut ones = vec![0usize; dist.n()];
    for _ in 0..samples {
        let m = dist.sample_with(&right, eps, &mut rng);
        for (c, &b) in ones.iter_mut().zip(m.bits()) {
            *c += b as usize;
        }
    }
    ones.iter().map(|&c| c as f64 / samples as f64).collect()
}

#[test]
fn initial_distribution_is_near_uniform_per_bit() {
    let dist = TtDistribution::init(20, 10, 5).unwrap();
    for f in bit_frequencies(&dist, 0.0, 100_000, 6) {
        assert!((0.4..=0.6).contains(&f), "frequency {f}");
    }
}

#[test]
fn full_mixing_gives_fair_coins() {
    // a sharply peaked train still samples fair bits when eps = 1
    let mut dist = TtDistribution::init(8, 2, 7).unwrap();
    for core in dist.cores_mut() {
        let (left, _, right) = core.shape();
        for a in 0..left {
            for b in 0..right {
                core.set(a, 0, b, 1e-3);
            }
        }
    }
    for f in bit_frequencies(&dist, 1.0, 20_000, 8) {
        assert!((f - 0.5).abs() <= 0.02, "frequency {f}");
    }
}

#[test]
fn single_elite_mass_grows_monotonically() {
    let mut dist = TtDistribution::init(8, 4, 9).unwrap();
    let elite = PruningMask::parse("10110010").unwrap();
    let mut adam = AdamState::new(&dist);
    let mut mass = Vec::new();
    for _ in 0..100 {
        let (next, _) =
            update_elites(&dist, &mut adam, std::slice::from_ref(&elite), 0.02).unwrap();
        dist = next;
        mass.push(dist.prob(&elite).unwrap());
    }
    // strictly increasing until saturation; past that, constant-rate Adam
    // steps overshoot slightly and the mass wobbles just below one
    let saturated = mass.iter().position(|&m| m > 0.99).expect("mass saturates");
    for w in mass[5..=saturated].windows(2) {
        assert!(w[1] > w[0], "mass decreased: {} -> {}", w[0], w[1]);
    }
    assert!(mass[saturated..].iter().all(|&m| m > 0.98));
    assert!(mass[99] > 0.5, "final mass {}", mass[99]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn likelihood_gradient_matches_central_differences(seed in 0u64..10_000, n in 2usize..7, rank in 1usize..4) {
        let dist = TtDistribution::init(n, rank, seed).unwrap();
        let mut rng = stream(seed, "elites", 0);
        let elites: Vec<PruningMask> = (0..4)
            .map(|_| PruningMask::from_bits((0..n).map(|_| rng.random_range(0..2u8)).collect()).unwrap())
            .collect();
        let (_, grads) = dist.log_likelihood_grad(&elites).unwrap();
        let h = 1e-5;
        for k in 0..n {
            for i in 0..dist.cores()[k].data.len() {
                let mut plus = dist.clone();
                plus.cores_mut()[k].data[i] += h;
                let mut minus = dist.clone();
                minus.cores_mut()[k].data[i] -= h;
                let fd = (plus.log_likelihood(&elites).unwrap() - minus.log_likelihood(&elites).unwrap()) / (2.0 * h);
                let g = grads[k][i];
                prop_assert!((g - fd).abs() <= 1e-5 * g.abs().max(1.0), "core {} entry {}: {} vs {}", k, i, g, fd);
            }
        }
    }
}
