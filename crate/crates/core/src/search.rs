//! Random search over the weighting coefficients, using the capacity search
//! as the inner feasibility step and a pluggable proxy evaluator.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::anneal::AnnealConfig;
use crate::capacity::{solve_with_cardinality, CapacitySearchConfig};
use crate::error::{Error, Result};
use crate::exec;
use crate::objective::ObjectiveHandle;
use crate::problem::{PruningMask, PruningProblem};
use crate::qubo::{CoefficientSet, Variant};
use crate::rng;

/// Probability of drawing an exact zero when `allow_zero` is set.
pub const ZERO_PROBABILITY: f64 = 0.2;

/// Value written in place of `log10(0)` in landscape files.
pub const ZERO_SENTINEL: f64 = -999.0;

/// Log-uniform range for one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRange {
    pub lo: f64,
    pub hi: f64,
    #[serde(default)]
    pub allow_zero: bool,
}

impl CoefficientRange {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self {
            lo,
            hi,
            allow_zero: false,
        }
    }

    pub const fn point(value: f64) -> Self {
        Self::new(value, value)
    }

    fn validate(&self, name: &str) -> Result<()> {
        // a collapsed [0, 0] range pins the coefficient at zero
        if self.lo == 0.0 && self.hi == 0.0 {
            return Ok(());
        }
        if !(self.lo > 0.0 && self.lo <= self.hi && self.hi.is_finite()) {
            return Err(Error::Argument(format!(
                "range for {name} must satisfy 0 < lo <= hi < inf, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut impl Rng) -> f64 {
        // both draws always happen so streams stay aligned across settings
        let zero_draw: f64 = rng.random();
        let u: f64 = rng.random();
        if self.allow_zero && zero_draw < ZERO_PROBABILITY {
            return 0.0;
        }
        if self.lo == self.hi {
            return self.lo;
        }
        let (a, b) = (self.lo.ln(), self.hi.ln());
        (a + u * (b - a)).exp().clamp(self.lo, self.hi)
    }
}

impl Default for CoefficientRange {
    fn default() -> Self {
        Self::new(1e-3, 1e2)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub alpha_t: CoefficientRange,
    pub alpha_f: CoefficientRange,
    pub beta_diag: CoefficientRange,
    pub beta_off: CoefficientRange,
    pub lambda_sim: CoefficientRange,
    /// Supplies the Fisher kind and the starting γ; the sampled
    /// coefficients overwrite the rest.
    pub template: CoefficientSet,
}

impl SearchSpace {
    /// Every range collapsed to the value in `coeffs`.
    pub fn point(coeffs: &CoefficientSet) -> Self {
        Self {
            alpha_t: CoefficientRange::point(coeffs.alpha_t),
            alpha_f: CoefficientRange::point(coeffs.alpha_f),
            beta_diag: CoefficientRange::point(coeffs.beta_diag),
            beta_off: CoefficientRange::point(coeffs.beta_off),
            lambda_sim: CoefficientRange::point(coeffs.lambda_sim),
            template: *coeffs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.alpha_t.validate("alpha_t")?;
        self.alpha_f.validate("alpha_f")?;
        self.beta_diag.validate("beta_diag")?;
        self.beta_off.validate("beta_off")?;
        self.lambda_sim.validate("lambda_sim")?;
        self.template.validate()
    }

    pub fn sample(&self, rng: &mut impl Rng) -> CoefficientSet {
        CoefficientSet {
            alpha_t: self.alpha_t.sample(rng),
            alpha_f: self.alpha_f.sample(rng),
            beta_diag: self.beta_diag.sample(rng),
            beta_off: self.beta_off.sample(rng),
            lambda_sim: self.lambda_sim.sample(rng),
            ..self.template
        }
    }
}

/// One search trial. Failed trials carry no mask and a score of `-inf`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub coeffs: CoefficientSet,
    pub mask: Option<PruningMask>,
    pub gamma_final: Option<f64>,
    #[serde(with = "score_serde")]
    pub proxy_score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Kept in memory only so ledgers stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.mask.is_some()
    }
}

/// JSON has no infinities; failed scores travel as `null`.
mod score_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

/// Settings shared by every trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub capacity: CapacitySearchConfig,
    pub anneal: AnnealConfig,
    pub seed: u64,
}

/// Samples `n_trials` coefficient sets, solves each at exactly `k_target`
/// pruned filters and scores the mask with `evaluator` (higher is better).
///
/// Bracketing failures become failed trials; other errors abort. The ledger
/// is in trial order whatever the execution order, and the best trial is the
/// earliest one with the maximal score.
pub fn random_search(
    problem: &PruningProblem,
    variant: Variant,
    space: &SearchSpace,
    k_target: usize,
    config: &SearchConfig,
    evaluator: &ObjectiveHandle,
) -> Result<SearchOutcome> {
    if config.n_trials < 1 {
        return Err(Error::Argument("n_trials must be >= 1".into()));
    }
    space.validate()?;
    if evaluator.n() != problem.n() {
        return Err(Error::Dimension {
            expected: problem.n(),
            actual: evaluator.n(),
        });
    }
    let mut capacity = config.capacity.clone();
    capacity.k_target = k_target;
    capacity.validate(problem.n())?;
    config.anneal.validate()?;

    let results = exec::map_range(config.n_trials, |t| {
        let mut rng = rng::stream(config.seed, "hparam-trial", t as u64);
        let coeffs = space.sample(&mut rng);
        run_trial(
            problem,
            variant,
            t,
            coeffs,
            &capacity,
            &config.anneal,
            evaluator,
        )
    });
    let trials = results.into_iter().collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, t) in trials.iter().enumerate() {
        if t.proxy_score > trials[best].proxy_score {
            best = i;
        }
    }
    Ok(SearchOutcome {
        best: trials[best].clone(),
        trials,
    })
}

fn run_trial(
    problem: &PruningProblem,
    variant: Variant,
    trial: usize,
    coeffs: CoefficientSet,
    capacity: &CapacitySearchConfig,
    anneal: &AnnealConfig,
    evaluator: &ObjectiveHandle,
) -> Result<TrialRecord> {
    let started = Instant::now();
    match solve_with_cardinality(problem, &coeffs, variant, capacity, anneal) {
        Ok(sol) => {
            let score = evaluator.evaluate(&sol.mask)?;
            Ok(TrialRecord {
                trial,
                coeffs,
                mask: Some(sol.mask),
                gamma_final: Some(sol.gamma_final),
                proxy_score: score,
                error: None,
                wall_time: started.elapsed(),
            })
        }
        Err(e @ Error::Bracket { .. }) => {
            log::warn!("trial {trial} failed: {e}");
            Ok(TrialRecord {
                trial,
                coeffs,
                mask: None,
                gamma_final: None,
                proxy_score: f64::NEG_INFINITY,
                error: Some(e.to_string()),
                wall_time: started.elapsed(),
            })
        }
        Err(e) => Err(e),
    }
}

/// Writes the ledger as one JSON object per line.
pub fn write_ledger(trials: &[TrialRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for t in trials {
        out.push_str(&serde_json::to_string(t).expect("trial serializes"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_ledger(path: impl AsRef<Path>) -> Result<Vec<TrialRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut trials = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        trials.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", lineno + 1),
        })?);
    }
    Ok(trials)
}

fn log_axis(value: f64) -> f64 {
    if value == 0.0 {
        ZERO_SENTINEL
    } else {
        value.log10()
    }
}

/// Landscape table: header `axis1,axis2,score`, then one row per trial with
/// the base-10 logarithms of the two coefficients and the proxy score.
/// Zero coefficients are written as [`ZERO_SENTINEL`]; failed trials score `-inf`.
pub fn landscape_csv(trials: &[TrialRecord], axes: (&str, &str)) -> Result<String> {
    if trials.is_empty() {
        return Err(Error::Argument("landscape needs at least one trial".into()));
    }
    for name in [axes.0, axes.1] {
        if trials[0].coeffs.get(name).is_none() {
            return Err(Error::Argument(format!(
                "unknown coefficient axis {name:?}"
            )));
        }
    }
    let mut out = String::from("axis1,axis2,score\n");
    for t in trials {
        let x = log_axis(t.coeffs.get(axes.0).expect("checked"));
        let y = log_axis(t.coeffs.get(axes.1).expect("checked"));
        writeln!(out, "{x},{y},{}", t.proxy_score).expect("string write");
    }
    Ok(out)
}

pub fn export_landscape(
    trials: &[TrialRecord],
    axes: (&str, &str),
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let text = landscape_csv(trials, axes)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Parses a landscape table back into `(axis1, axis2, score)` rows.
pub fn parse_landscape(text: &str) -> Result<Vec<(f64, f64, f64)>> {
    let bad = |message: String| Error::Parse {
        path: "<landscape>".into(),
        message,
    };
    let mut lines = text.lines();
    if lines.next() != Some("axis1,axis2,score") {
        return Err(bad("missing header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(bad(format!("row {}: expected 3 fields", i + 1)));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| bad(format!("row {}: {s:?}: {e}", i + 1)))
            };
            Ok((parse(fields[0])?, parse(fields[1])?, parse(fields[2])?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::synth_problem;

    fn config(n_trials: usize, k: usize) -> SearchConfig {
        SearchConfig {
            n_trials,
            capacity: CapacitySearchConfig::new(k),
            anneal: AnnealConfig {
                num_reads: 10,
                sweeps_per_read: 200,
                ..AnnealConfig::default()
            },
            seed: 5,
        }
    }

    #[test]
    fn sampled_values_stay_in_range() {
        let space = SearchSpace {
            alpha_f: CoefficientRange {
                allow_zero: true,
                ..CoefficientRange::default()
            },
            ..SearchSpace::default()
        };
        let mut rng = rng::stream(1, "t", 0);
        let mut zeros = 0;
        for _ in 0..2000 {
            let c = space.sample(&mut rng);
            assert!((1e-3..=1e2).contains(&c.alpha_t));
            if c.alpha_f == 0.0 {
                zeros += 1;
            } else {
                assert!((1e-3..=1e2).contains(&c.alpha_f));
            }
        }
        assert!((300..500).contains(&zeros), "zeros = {zeros}");
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let space = SearchSpace {
            beta_off: CoefficientRange::new(0.0, 1.0),
            ..SearchSpace::default()
        };
        assert!(space.validate().is_err());
        let p = synth_problem(8, 2, 0).unwrap();
        let h = ObjectiveHandle::separable(vec![0.0; 8]);
        assert!(random_search(
            &p,
            Variant::ClassicL1,
            &SearchSpace::default(),
            3,
            &config(0, 3),
            &h
        )
        .is_err());
    }

    #[test]
    fn single_trial_is_best() {
        let p = synth_problem(10, 2, 1).unwrap();
        let h = ObjectiveHandle::separable((0..10).map(|i| i as f64).collect());
        let out = random_search(
            &p,
            Variant::GradientAware,
            &SearchSpace::default(),
            4,
            &config(1, 4),
            &h,
        )
        .unwrap();
        assert_eq!(out.trials.len(), 1);
        assert_eq!(out.best, out.trials[0]);
        assert_eq!(out.best.mask.as_ref().unwrap().cardinality(), 4);
    }

    #[test]
    fn collapsed_space_gives_identical_trials() {
        let p = synth_problem(12, 3, 2).unwrap();
        let h = ObjectiveHandle::separable(vec![1.0; 12]);
        let space = SearchSpace::point(&CoefficientSet::default());
        let out = random_search(&p, Variant::Hybrid, &space, 5, &config(4, 5), &h).unwrap();
        for t in &out.trials {
            assert_eq!(t.coeffs, out.trials[0].coeffs);
            assert_eq!(t.mask, out.trials[0].mask);
        }
    }

    #[test]
    fn ledger_and_landscape_round_trip() {
        let p = synth_problem(10, 2, 3).unwrap();
        let h = ObjectiveHandle::separable((0..10).map(|i| (i as f64).sin()).collect());
        let space = SearchSpace {
            alpha_f: CoefficientRange {
                allow_zero: true,
                ..CoefficientRange::default()
            },
            ..SearchSpace::default()
        };
        let mut out =
            random_search(&p, Variant::GradientAware, &space, 3, &config(12, 3), &h).unwrap();
        out.trials[2].proxy_score = f64::NEG_INFINITY;
        out.trials[2].mask = None;

        let dir = tempfile::tempdir().unwrap();
        let ledger = dir.path().join("ledger.jsonl");
        write_ledger(&out.trials, &ledger).unwrap();
        let back = read_ledger(&ledger).unwrap();
        assert_eq!(back.len(), out.trials.len());
        for (a, b) in back.iter().zip(&out.trials) {
            assert_eq!(a.coeffs, b.coeffs);
            assert_eq!(a.mask, b.mask);
            assert_eq!(a.proxy_score, b.proxy_score);
        }

        let csv = landscape_csv(&out.trials, ("alpha_t", "alpha_f")).unwrap();
        let rows = parse_landscape(&csv).unwrap();
        assert_eq!(rows.len(), out.trials.len());
        for (row, t) in rows.iter().zip(&out.trials) {
            assert_eq!(row.2, t.proxy_score);
            assert!(row.0.is_finite() && row.1.is_finite());
            if t.coeffs.alpha_f == 0.0 {
                assert_eq!(row.1, ZERO_SENTINEL);
            }
        }
        assert!(landscape_csv(&[], ("alpha_t", "alpha_f")).is_err());
        assert!(landscape_csv(&out.trials, ("alpha_t", "bogus")).is_err());
    }
}
