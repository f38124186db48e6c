//! Exact-cardinality solving by bisection on the capacity incentive `gamma`.
//!
//! Raising `gamma` lowers every diagonal entry by `gamma * D̂_i`, which makes
//! pruning cheaper. The search brackets the target count `K` by doubling an
//! upper bound, bisects on the annealed cardinality, and finishes with a
//! greedy repair when no sampled `gamma` lands exactly on `K`.

use serde::{Deserialize, Serialize};

use crate::anneal::{anneal, AnnealConfig, SolveResult};
use crate::error::{Error, Result};
use crate::problem::{PruningMask, PruningProblem};
use crate::qubo::{assemble_qubo, CoefficientSet, QuboMatrix, Variant};

pub const MAX_DOUBLINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySearchConfig {
    pub k_target: usize,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub reads_search: usize,
    pub reads_final: usize,
}

impl CapacitySearchConfig {
    pub fn new(k_target: usize) -> Self {
        Self {
            k_target,
            gamma_lo: 0.0,
            gamma_hi: 1.0,
            tol: 1e-12,
            max_iters: 20,
            reads_search: 15,
            reads_final: 100,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.k_target < 1 || self.k_target >= n {
            return Err(Error::Argument(format!(
                "k_target = {} must lie in [1, {}]",
                self.k_target,
                n.saturating_sub(1)
            )));
        }
        if !(self.tol > 0.0) || self.max_iters < 1 {
            return Err(Error::Argument("tol must be > 0 and max_iters >= 1".into()));
        }
        if !(self.gamma_lo >= 0.0 && self.gamma_lo.is_finite())
            || !(self.gamma_hi > self.gamma_lo && self.gamma_hi.is_finite())
        {
            return Err(Error::Argument(format!(
                "need 0 <= gamma_lo < gamma_hi, got [{}, {}]",
                self.gamma_lo, self.gamma_hi
            )));
        }
        if self.reads_search < 1 || self.reads_final < 1 {
            return Err(Error::Argument("read counts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TracePhase {
    Bracket,
    Bisect,
    Final,
}

/// One annealing call of the search, for the machine-readable trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub phase: TracePhase,
    pub iteration: usize,
    pub gamma_lo: f64,
    pub gamma_mid: f64,
    pub gamma_hi: f64,
    pub cardinality: usize,
    pub best_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacitySolution {
    pub mask: PruningMask,
    /// Energy of `mask` at `gamma_final`.
    pub energy: f64,
    pub gamma_final: f64,
    /// Final-phase annealing result before any repair.
    pub result: SolveResult,
    pub repaired: bool,
    pub trace: Vec<TraceRecord>,
}

/// Assembles the QUBO and runs [`solve_qubo_with_cardinality`].
pub fn solve_with_cardinality(
    problem: &PruningProblem,
    coeffs: &CoefficientSet,
    variant: Variant,
    config: &CapacitySearchConfig,
    anneal_cfg: &AnnealConfig,
) -> Result<CapacitySolution> {
    config.validate(problem.n())?;
    let q = assemble_qubo(problem, coeffs, variant)?;
    solve_qubo_with_cardinality(&q, config, anneal_cfg)
}

/// Cardinality search on an assembled QUBO; `gamma` is swapped through its
/// stored components, so the QUBO must come from `assemble_qubo`.
pub fn solve_qubo_with_cardinality(
    q: &QuboMatrix,
    config: &CapacitySearchConfig,
    anneal_cfg: &AnnealConfig,
) -> Result<CapacitySolution> {
    config.validate(q.n())?;
    anneal_cfg.validate()?;
    let k = config.k_target;
    let search_cfg = anneal_cfg.with_reads(config.reads_search);
    let mut trace = Vec::new();
    // (gamma, search result) for every evaluated point
    let mut evaluated: Vec<(f64, SolveResult)> = Vec::new();

    let mut solve_at =
        |gamma: f64, phase: TracePhase, iteration: usize, lo: f64, hi: f64| -> Result<usize> {
            let r = anneal(&q.with_gamma(gamma)?, &search_cfg)?;
            let card = r.best_mask.cardinality();
            log::debug!(
                "gamma search {phase:?} #{iteration}: gamma = {gamma:e}, cardinality = {card}"
            );
            trace.push(TraceRecord {
                phase,
                iteration,
                gamma_lo: lo,
                gamma_mid: gamma,
                gamma_hi: hi,
                cardinality: card,
                best_energy: r.best_energy,
            });
            evaluated.push((gamma, r));
            Ok(card)
        };

    let mut lo = config.gamma_lo;
    let mut hi = config.gamma_hi.max(1.0);
    let mut card_hi = solve_at(hi, TracePhase::Bracket, 0, lo, hi)?;
    let mut doublings = 0;
    while card_hi < k {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::Bracket {
                k_target: k,
                gamma_hi: hi,
                cardinality: card_hi,
                doublings,
            });
        }
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        card_hi = solve_at(hi, TracePhase::Bracket, doublings, lo, hi)?;
    }

    let mut accepted = (card_hi == k).then_some(hi);
    if accepted.is_none() {
        for iteration in 0..config.max_iters {
            if hi - lo < config.tol {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let card = solve_at(mid, TracePhase::Bisect, iteration, lo, hi)?;
            if card == k {
                accepted = Some(mid);
                break;
            }
            if card < k {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    }
    let gamma_final = accepted.unwrap_or_else(|| closest_gamma(&evaluated, k));
    let search_mask = evaluated
        .iter()
        .rev()
        .find(|(g, r)| *g == gamma_final && r.best_mask.cardinality() == k)
        .map(|(_, r)| r.best_mask.clone());

    let q_final = q.with_gamma(gamma_final)?;
    let result = anneal(&q_final, &anneal_cfg.with_reads(config.reads_final))?;
    let card = result.best_mask.cardinality();
    trace.push(TraceRecord {
        phase: TracePhase::Final,
        iteration: 0,
        gamma_lo: lo,
        gamma_mid: gamma_final,
        gamma_hi: hi,
        cardinality: card,
        best_energy: result.best_energy,
    });

    let (mask, repaired) = if card == k {
        (result.best_mask.clone(), false)
    } else {
        let fixed = repair_mask(&q_final, &result.best_mask, k)?;
        match search_mask {
            Some(m) if q_final.energy(&m)? <= q_final.energy(&fixed)? => (m, false),
            _ => (fixed, true),
        }
    };
    let energy = q_final.energy(&mask)?;
    Ok(CapacitySolution {
        mask,
        energy,
        gamma_final,
        result,
        repaired,
        trace,
    })
}

/// Evaluated `gamma` whose cardinality is nearest `k`; overshoot wins ties,
/// then the most recent point.
fn closest_gamma(evaluated: &[(f64, SolveResult)], k: usize) -> f64 {
    let mut best: Option<(usize, bool, f64)> = None;
    for (gamma, r) in evaluated {
        let card = r.best_mask.cardinality();
        let dist = card.abs_diff(k);
        let over = card > k;
        let better = match best {
            None => true,
            Some((d, o, _)) => dist < d || (dist == d && (over || !o)),
        };
        if better {
            best = Some((dist, over, *gamma));
        }
    }
    best.expect("at least one evaluation").2
}

/// Greedy single-bit moves to exact cardinality `k_target`.
///
/// Clears the set bit (or sets the unset bit) with the smallest energy
/// change, lowest index on ties, until the count matches.
pub fn repair_mask(q: &QuboMatrix, mask: &PruningMask, k_target: usize) -> Result<PruningMask> {
    let n = q.n();
    if mask.len() != n {
        return Err(Error::Dimension {
            expected: n,
            actual: mask.len(),
        });
    }
    if k_target > n {
        return Err(Error::Argument(format!(
            "k_target = {k_target} exceeds N = {n}"
        )));
    }
    let mut bits = mask.bits().to_vec();
    let mut field = vec![0.0; n];
    for i in 0..n {
        if bits[i] == 1 {
            for (h, w) in field.iter_mut().zip(q.coupling_row(i)) {
                *h += w;
            }
        }
    }
    let mut card = mask.cardinality();
    while card != k_target {
        let want = u8::from(card > k_target);
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..n {
            if bits[i] != want {
                continue;
            }
            let s = q.diag()[i] + field[i];
            let delta = if want == 1 { -s } else { s };
            if pick.is_none_or(|(_, d)| delta < d) {
                pick = Some((i, delta));
            }
        }
        let (i, _) = pick.expect("a movable bit exists while card != k");
        let sign = if bits[i] == 1 { -1.0 } else { 1.0 };
        bits[i] ^= 1;
        for (h, w) in field.iter_mut().zip(q.coupling_row(i)) {
            *h += sign * w;
        }
        if want == 1 {
            card -= 1;
        } else {
            card += 1;
        }
    }
    PruningMask::from_bits(bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{synth_problem, FilterRecord};
    use std::collections::BTreeMap;

    fn uniform_problem(n: usize) -> PruningProblem {
        let filters = (0..n)
            .map(|id| FilterRecord {
                id,
                layer: 0,
                param_count: 9,
                l1_score: 0.5,
                taylor_score: 1.0,
                fisher_w_score: None,
                fisher_c_score: None,
            })
            .collect();
        PruningProblem::new(filters, vec![], BTreeMap::new()).unwrap()
    }

    fn fast_anneal() -> AnnealConfig {
        AnnealConfig {
            sweeps_per_read: 200,
            ..AnnealConfig::default()
        }
    }

    #[test]
    fn repair_leaves_exact_mask_alone() {
        let q = QuboMatrix::from_parts(vec![1.0, -2.0, 0.5], &[(0, 2, 1.0)]).unwrap();
        let m = PruningMask::parse("011").unwrap();
        assert_eq!(repair_mask(&q, &m, 2).unwrap(), m);
    }

    #[test]
    fn repair_on_diagonal_clears_largest_entry() {
        let q = QuboMatrix::from_parts(vec![0.3, -1.0, 2.0, 0.7], &[]).unwrap();
        let m = PruningMask::parse("1011").unwrap();
        let r = repair_mask(&q, &m, 2).unwrap();
        assert_eq!(r.to_string(), "1001");
        let r = repair_mask(&q, &PruningMask::zeros(4), 1).unwrap();
        assert_eq!(r.to_string(), "0100");
    }

    #[test]
    fn repair_breaks_ties_by_index() {
        let q = QuboMatrix::from_parts(vec![1.0; 4], &[]).unwrap();
        let r = repair_mask(&q, &PruningMask::ones(4), 1).unwrap();
        assert_eq!(r.to_string(), "0001");
    }

    #[test]
    fn uniform_problem_yields_exact_k() {
        let p = uniform_problem(8);
        let cfg = CapacitySearchConfig::new(4);
        let sol = solve_with_cardinality(
            &p,
            &CoefficientSet::default(),
            Variant::ClassicL1,
            &cfg,
            &fast_anneal(),
        )
        .unwrap();
        assert_eq!(sol.mask.cardinality(), 4);
        // all 4-subsets are equivalent by symmetry
        let q = assemble_qubo(
            &p,
            &CoefficientSet::default().with_gamma(sol.gamma_final),
            Variant::ClassicL1,
        )
        .unwrap();
        let other = PruningMask::parse("11110000").unwrap();
        let e_other = q.energy(&other).unwrap();
        assert!((sol.energy - e_other).abs() <= 1e-9 * e_other.abs().max(1.0));
    }

    #[test]
    fn zero_gamma_prunes_nothing_with_positive_terms() {
        let p = synth_problem(10, 2, 4).unwrap();
        let q = assemble_qubo(&p, &CoefficientSet::default(), Variant::GradientAware).unwrap();
        assert!(q.diag().iter().all(|&d| d > 0.0));
        assert!(q.upper_entries().iter().all(|e| e.2 >= 0.0));
        let r = anneal(&q, &fast_anneal().with_reads(15)).unwrap();
        assert_eq!(r.best_mask.cardinality(), 0);
    }

    #[test]
    fn search_hits_target_and_records_trace() {
        let p = synth_problem(16, 4, 9).unwrap();
        for k in [1, 5, 15] {
            let sol = solve_with_cardinality(
                &p,
                &CoefficientSet::default(),
                Variant::Hybrid,
                &CapacitySearchConfig::new(k),
                &fast_anneal(),
            )
            .unwrap();
            assert_eq!(sol.mask.cardinality(), k);
            assert!(!sol.trace.is_empty());
            assert_eq!(sol.trace.last().unwrap().phase, TracePhase::Final);
        }
    }

    #[test]
    fn rejects_out_of_range_k() {
        let p = synth_problem(6, 1, 0).unwrap();
        for k in [0, 6] {
            let err = solve_with_cardinality(
                &p,
                &CoefficientSet::default(),
                Variant::ClassicL1,
                &CapacitySearchConfig::new(k),
                &fast_anneal(),
            )
            .unwrap_err();
            assert!(matches!(err, Error::Argument(_)));
        }
    }

    #[test]
    fn bracket_error_when_pruning_never_pays() {
        let q = QuboMatrix::parametric(vec![1.0; 4], vec![0.0; 4], &[], 0.0).unwrap();
        let err = solve_qubo_with_cardinality(&q, &CapacitySearchConfig::new(2), &fast_anneal())
            .unwrap_err();
        match err {
            Error::Bracket {
                doublings,
                cardinality,
                ..
            } => {
                assert_eq!(doublings, MAX_DOUBLINGS);
                assert_eq!(cardinality, 0);
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn fixed_gamma_qubo_is_rejected() {
        let q = QuboMatrix::from_parts(vec![1.0; 4], &[]).unwrap();
        let err = solve_qubo_with_cardinality(&q, &CapacitySearchConfig::new(2), &fast_anneal())
            .unwrap_err();
        assert!(matches!(err, Error::MissingData(_)));
    }
}
