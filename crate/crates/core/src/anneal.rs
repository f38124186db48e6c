//! Single-flip Metropolis simulated annealing and an exhaustive oracle.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::problem::PruningMask;
use crate::qubo::QuboMatrix;
use crate::rng;

pub const BRUTE_FORCE_MAX_N: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Geometric,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealConfig {
    pub num_reads: usize,
    pub sweeps_per_read: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            num_reads: 100,
            sweeps_per_read: 1000,
            beta_start: 0.1,
            beta_end: 10.0,
            schedule: Schedule::Geometric,
            seed: 123,
        }
    }
}

impl AnnealConfig {
    pub fn with_reads(&self, num_reads: usize) -> Self {
        Self {
            num_reads,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_reads < 1 || self.sweeps_per_read < 1 {
            return Err(Error::Argument(
                "num_reads and sweeps_per_read must be >= 1".into(),
            ));
        }
        if !(self.beta_start > 0.0 && self.beta_start.is_finite() && self.beta_end.is_finite()) {
            return Err(Error::Argument(format!(
                "beta_start = {} must be positive and finite",
                self.beta_start
            )));
        }
        if self.beta_end <= self.beta_start {
            return Err(Error::Argument(format!(
                "beta_end = {} must exceed beta_start = {}",
                self.beta_end, self.beta_start
            )));
        }
        Ok(())
    }

    /// Inverse temperature at `sweep` (0-based).
    pub fn beta_at(&self, sweep: usize) -> f64 {
        if self.sweeps_per_read <= 1 {
            return self.beta_start;
        }
        let t = sweep as f64 / (self.sweeps_per_read - 1) as f64;
        match self.schedule {
            Schedule::Geometric => self.beta_start * (self.beta_end / self.beta_start).powf(t),
            Schedule::Linear => self.beta_start + (self.beta_end - self.beta_start) * t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub best_mask: PruningMask,
    pub best_energy: f64,
    pub per_read_energies: Vec<f64>,
    pub flips_evaluated: u64,
}

struct ReadOutcome {
    bits: Vec<u8>,
    energy: f64,
}

fn run_read(q: &QuboMatrix, config: &AnnealConfig, read: usize) -> ReadOutcome {
    let n = q.n();
    let mut rng = rng::stream(config.seed, "anneal-read", read as u64);
    let mut bits: Vec<u8> = (0..n).map(|_| u8::from(rng.random_bool(0.5))).collect();
    // local field h_i = Σ_j Q_ij p_j
    let mut field = vec![0.0; n];
    for i in 0..n {
        if bits[i] == 1 {
            for (h, w) in field.iter_mut().zip(q.coupling_row(i)) {
                *h += w;
            }
        }
    }
    let diag = q.diag();
    let mut energy = q.energy_bits(&bits);
    let mut best_energy = energy;
    let mut best_bits = bits.clone();
    let mut order: Vec<usize> = (0..n).collect();

    for sweep in 0..config.sweeps_per_read {
        let beta = config.beta_at(sweep);
        order.shuffle(&mut rng);
        for &i in &order {
            let s = diag[i] + field[i];
            let delta = if bits[i] == 1 { -s } else { s };
            let accept = delta <= 0.0 || rng.random::<f64>() < (-beta * delta).exp();
            if accept {
                let sign = if bits[i] == 1 { -1.0 } else { 1.0 };
                bits[i] ^= 1;
                energy += delta;
                for (h, w) in field.iter_mut().zip(q.coupling_row(i)) {
                    *h += sign * w;
                }
                if energy < best_energy {
                    best_energy = energy;
                    best_bits.copy_from_slice(&bits);
                }
            }
        }
    }
    let energy = q.energy_bits(&best_bits);
    ReadOutcome {
        bits: best_bits,
        energy,
    }
}

/// Minimizes the QUBO with independent annealing reads; each read owns a
/// random stream derived from `(seed, read index)`, so the result does not
/// depend on whether reads run in parallel.
pub fn anneal(q: &QuboMatrix, config: &AnnealConfig) -> Result<SolveResult> {
    config.validate()?;
    let n = q.n();
    if n == 0 {
        return Err(Error::Argument("empty QUBO".into()));
    }
    let reads = exec::map_range(config.num_reads, |r| run_read(q, config, r));
    let mut best = 0;
    for (r, out) in reads.iter().enumerate() {
        if out.energy < reads[best].energy {
            best = r;
        }
    }
    Ok(SolveResult {
        best_mask: PruningMask::from_bits(reads[best].bits.clone())?,
        best_energy: reads[best].energy,
        per_read_energies: reads.iter().map(|r| r.energy).collect(),
        flips_evaluated: (config.num_reads * config.sweeps_per_read * n) as u64,
    })
}

struct Candidate {
    bits: Vec<u8>,
    energy: f64,
}

impl Candidate {
    fn offer(&mut self, bits: &[u8], energy: f64, tol: f64) {
        let better = energy < self.energy - tol
            || (energy <= self.energy + tol && bits < self.bits.as_slice());
        if better {
            self.energy = energy;
            self.bits.copy_from_slice(bits);
        }
    }
}

/// Exact minimum by enumeration of all `2^N` masks; ties (up to rounding)
/// go to the lexicographically smallest mask, bit 0 first.
pub fn brute_force(q: &QuboMatrix) -> Result<SolveResult> {
    let n = q.n();
    if n > BRUTE_FORCE_MAX_N {
        return Err(Error::Size {
            n,
            max: BRUTE_FORCE_MAX_N,
        });
    }
    if n == 0 {
        return Err(Error::Argument("empty QUBO".into()));
    }
    let scale: f64 = q.diag().iter().map(|v| v.abs()).sum::<f64>()
        + q.upper_entries().iter().map(|e| e.2.abs()).sum::<f64>();
    let tol = 1e-10 * scale.max(1.0);

    let prefix_bits = n.min(6);
    let suffix_bits = n - prefix_bits;
    let chunks = exec::map_range(1usize << prefix_bits, |prefix| {
        let mut bits = vec![0u8; n];
        for b in 0..prefix_bits {
            bits[b] = ((prefix >> (prefix_bits - 1 - b)) & 1) as u8;
        }
        let mut field = vec![0.0; n];
        for i in 0..n {
            if bits[i] == 1 {
                for (h, w) in field.iter_mut().zip(q.coupling_row(i)) {
                    *h += w;
                }
            }
        }
        let mut energy = q.energy_bits(&bits);
        let mut cand = Candidate {
            bits: bits.clone(),
            energy,
        };
        for g in 1u64..(1u64 << suffix_bits) {
            let i = prefix_bits + g.trailing_zeros() as usize;
            let s = q.diag()[i] + field[i];
            let sign = if bits[i] == 1 { -1.0 } else { 1.0 };
            energy += sign * s;
            bits[i] ^= 1;
            for (h, w) in field.iter_mut().zip(q.coupling_row(i)) {
                *h += sign * w;
            }
            cand.offer(&bits, energy, tol);
        }
        cand
    });
    let mut iter = chunks.into_iter();
    let mut best = iter.next().expect("at least one chunk");
    for c in iter {
        best.offer(&c.bits, c.energy, tol);
    }
    let energy = q.energy_bits(&best.bits);
    Ok(SolveResult {
        best_mask: PruningMask::from_bits(best.bits)?,
        best_energy: energy,
        per_read_energies: vec![energy],
        flips_evaluated: 1u64 << n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag_qubo(values: Vec<f64>) -> QuboMatrix {
        QuboMatrix::from_parts(values, &[]).unwrap()
    }

    fn quick() -> AnnealConfig {
        AnnealConfig {
            num_reads: 10,
            sweeps_per_read: 100,
            ..AnnealConfig::default()
        }
    }

    #[test]
    fn positive_diagonal_keeps_everything() {
        let r = anneal(&diag_qubo(vec![1.0; 8]), &quick()).unwrap();
        assert_eq!(r.best_mask, PruningMask::zeros(8));
        assert_eq!(r.best_energy, 0.0);
    }

    #[test]
    fn negative_diagonal_prunes_everything() {
        let r = anneal(&diag_qubo(vec![-1.0; 8]), &quick()).unwrap();
        assert_eq!(r.best_mask, PruningMask::ones(8));
        assert_eq!(r.best_energy, -8.0);
    }

    #[test]
    fn brute_force_small_cases() {
        let r = brute_force(&diag_qubo(vec![-2.0])).unwrap();
        assert_eq!(r.best_mask.bits(), &[1]);
        assert_eq!(r.best_energy, -2.0);

        let q = QuboMatrix::from_parts(vec![-1.0, -1.0], &[(0, 1, 3.0)]).unwrap();
        let r = brute_force(&q).unwrap();
        assert_eq!(r.best_mask.bits(), &[0, 1]);
        assert_eq!(r.best_energy, -1.0);
    }

    #[test]
    fn brute_force_size_limit() {
        let q = diag_qubo(vec![1.0; 25]);
        assert!(matches!(brute_force(&q), Err(Error::Size { n: 25, .. })));
    }

    #[test]
    fn result_invariants_hold() {
        let q = QuboMatrix::from_parts(
            vec![-1.0, 0.5, -0.3, 0.2],
            &[(0, 1, -0.4), (1, 2, 1.1), (0, 3, 0.7), (2, 3, -0.9)],
        )
        .unwrap();
        let r = anneal(&q, &quick()).unwrap();
        let min = r
            .per_read_energies
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.best_energy, min);
        assert!((q.energy(&r.best_mask).unwrap() - r.best_energy).abs() < 1e-9);
        assert_eq!(r.flips_evaluated, 10 * 100 * 4);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let q = diag_qubo(vec![1.0; 2]);
        for bad in [
            AnnealConfig {
                num_reads: 0,
                ..quick()
            },
            AnnealConfig {
                beta_end: 0.05,
                ..quick()
            },
            AnnealConfig {
                beta_start: 0.0,
                ..quick()
            },
        ] {
            assert!(anneal(&q, &bad).is_err());
        }
    }

    #[test]
    fn schedules_hit_endpoints() {
        for schedule in [Schedule::Geometric, Schedule::Linear] {
            let c = AnnealConfig {
                schedule,
                ..AnnealConfig::default()
            };
            assert!((c.beta_at(0) - 0.1).abs() < 1e-12);
            assert!((c.beta_at(999) - 10.0).abs() < 1e-9);
        }
    }
}
