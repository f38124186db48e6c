//! Tensor-train refinement of a seed mask against a black-box metric.
//!
//! Each iteration samples a batch from the TT distribution (plus the seed
//! during the first iterations and single-bit mutations of the incumbent),
//! scores it with the penalized objective `raw - lambda * |card - K|`, and
//! takes one Adam step on the log-likelihood of the batch elites.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec;
use crate::objective::{penalized, ObjectiveHandle};
use crate::problem::PruningMask;
use crate::rng;
use crate::tt::{update_elites, AdamState, ScaledMatrix, TtDistribution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    /// Maximum number of fresh objective evaluations.
    pub budget: usize,
    pub batch: usize,
    pub elites: usize,
    pub learn_rate: f64,
    pub rank: usize,
    pub epsilon: f64,
    pub mutations: usize,
    pub seed_inject_iters: usize,
    pub lambda_card: f64,
    pub seed: u64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            budget: 20_000,
            batch: 300,
            elites: 20,
            learn_rate: 0.02,
            rank: 10,
            epsilon: 0.03,
            mutations: 15,
            seed_inject_iters: 10,
            lambda_card: 10.0,
            seed: 123,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch < 1 || self.elites < 1 || self.elites > self.batch {
            return Err(Error::Argument(format!(
                "need 1 <= elites ({}) <= batch ({})",
                self.elites, self.batch
            )));
        }
        if self.budget < self.batch {
            return Err(Error::Argument(format!(
                "budget ({}) must be at least one batch ({})",
                self.budget, self.batch
            )));
        }
        if self.rank < 1 {
            return Err(Error::Argument("rank must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Argument(format!(
                "epsilon = {} outside [0, 1]",
                self.epsilon
            )));
        }
        if !(self.learn_rate >= 0.0 && self.learn_rate.is_finite()) {
            return Err(Error::Argument("learn_rate must be finite and >= 0".into()));
        }
        if !(self.lambda_card >= 0.0 && self.lambda_card.is_finite()) {
            return Err(Error::Argument(
                "lambda_card must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.budget.div_ceil(self.batch)
    }
}

/// Builds one batch of exactly `config.batch` masks.
///
/// During the first `seed_inject_iters` iterations the batch starts with
/// `qubo_seed`; every iteration adds `mutations` single-bit flips of
/// `incumbent`; the rest are TT samples with per-bit exploration `epsilon`.
pub fn sample_batch(
    dist: &TtDistribution,
    right: &[ScaledMatrix],
    config: &RefineConfig,
    iteration: usize,
    qubo_seed: &PruningMask,
    incumbent: &PruningMask,
    rng: &mut impl Rng,
) -> Vec<PruningMask> {
    let mut batch = Vec::with_capacity(config.batch);
    if iteration < config.seed_inject_iters {
        batch.push(qubo_seed.clone());
    }
    let n = incumbent.len();
    for _ in 0..config.mutations {
        if batch.len() == config.batch {
            break;
        }
        batch.push(incumbent.flipped(rng.random_range(0..n)));
    }
    while batch.len() < config.batch {
        batch.push(dist.sample_with(right, config.epsilon, rng));
    }
    batch
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub best_f: f64,
    pub mean_f: f64,
    pub unique_evals: usize,
    pub best_cardinality: usize,
}

/// Everything needed to continue a refinement run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineState {
    pub config: RefineConfig,
    pub k_target: usize,
    pub seed_mask: PruningMask,
    /// Next iteration to run; per-iteration random streams derive from it.
    pub next_iteration: usize,
    pub dist: TtDistribution,
    pub adam: AdamState,
    pub best_mask: PruningMask,
    pub best_raw: f64,
    pub best_f: f64,
    pub fresh_evals: usize,
    pub history: Vec<HistoryRecord>,
}

impl RefineState {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).expect("state serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineOutcome {
    pub best_mask: PruningMask,
    pub best_raw: f64,
    pub best_f: f64,
    pub seed_raw: f64,
    pub seed_f: f64,
    pub history: Vec<HistoryRecord>,
    pub fresh_evals: usize,
    pub state: RefineState,
}

/// Runs the full refinement from `seed_mask`.
pub fn refine(
    seed_mask: &PruningMask,
    objective: &ObjectiveHandle,
    k_target: usize,
    config: &RefineConfig,
) -> Result<RefineOutcome> {
    let state = start(seed_mask, objective, k_target, config)?;
    run(state, objective, None)
}

/// Evaluates the seed and builds the initial state.
pub fn start(
    seed_mask: &PruningMask,
    objective: &ObjectiveHandle,
    k_target: usize,
    config: &RefineConfig,
) -> Result<RefineState> {
    config.validate()?;
    let n = seed_mask.len();
    if n != objective.n() {
        return Err(Error::Dimension {
            expected: objective.n(),
            actual: n,
        });
    }
    if seed_mask.cardinality() != k_target {
        log::warn!(
            "seed mask prunes {} filters, target is {k_target}",
            seed_mask.cardinality()
        );
    }
    let dist = TtDistribution::init(
        n,
        config.rank,
        rng::child_seed(config.seed, "refine-init", 0),
    )?;
    let adam = AdamState::new(&dist);
    let (raw, source) = objective.evaluate_sourced(seed_mask)?;
    let f = penalized(raw, seed_mask.cardinality(), k_target, config.lambda_card);
    Ok(RefineState {
        config: config.clone(),
        k_target,
        seed_mask: seed_mask.clone(),
        next_iteration: 0,
        dist,
        adam,
        best_mask: seed_mask.clone(),
        best_raw: raw,
        best_f: f,
        fresh_evals: usize::from(source == crate::objective::EvalSource::Fresh),
        history: Vec::new(),
    })
}

/// Continues `state` to the end of its budget, optionally writing a
/// checkpoint after every iteration.
pub fn run(
    mut state: RefineState,
    objective: &ObjectiveHandle,
    checkpoint: Option<&Path>,
) -> Result<RefineOutcome> {
    let config = state.config.clone();
    let k = state.k_target;
    let total = config.iterations();
    while state.next_iteration < total {
        step(&mut state, objective, &config, k)?;
        if let Some(path) = checkpoint {
            state.save(path)?;
        }
    }
    let seed_raw = objective.evaluate(&state.seed_mask)?;
    let seed_f = penalized(
        seed_raw,
        state.seed_mask.cardinality(),
        k,
        config.lambda_card,
    );
    Ok(RefineOutcome {
        best_mask: state.best_mask.clone(),
        best_raw: state.best_raw,
        best_f: state.best_f,
        seed_raw,
        seed_f,
        history: state.history.clone(),
        fresh_evals: state.fresh_evals,
        state,
    })
}

fn step(
    state: &mut RefineState,
    objective: &ObjectiveHandle,
    config: &RefineConfig,
    k: usize,
) -> Result<()> {
    let iteration = state.next_iteration;
    let mut rng = rng::stream(config.seed, "refine-batch", iteration as u64);
    let right = state.dist.right_environments();
    let batch = sample_batch(
        &state.dist,
        &right,
        config,
        iteration,
        &state.seed_mask,
        &state.best_mask,
        &mut rng,
    );

    let mut distinct: Vec<PruningMask> = Vec::with_capacity(batch.len());
    {
        let mut seen = std::collections::HashSet::with_capacity(batch.len());
        for m in batch {
            if seen.insert(m.clone()) {
                distinct.push(m);
            }
        }
    }
    // keep cached masks plus as many new ones as the budget allows, in batch order
    let mut remaining = config.budget.saturating_sub(state.fresh_evals);
    let mut scored_masks = Vec::with_capacity(distinct.len());
    let mut fresh = 0;
    for m in distinct {
        if objective.cache().contains(&m) {
            scored_masks.push(m);
        } else if remaining > 0 {
            remaining -= 1;
            fresh += 1;
            scored_masks.push(m);
        }
    }
    let raws = exec::map_slice(&scored_masks, |m| objective.evaluate(m));
    let mut scored = Vec::with_capacity(scored_masks.len());
    for (m, raw) in scored_masks.into_iter().zip(raws) {
        let raw = raw?;
        let f = penalized(raw, m.cardinality(), k, config.lambda_card);
        scored.push((m, raw, f));
    }
    state.fresh_evals += fresh;

    // every batch carries at least one evaluated mask unless the budget is
    // exhausted and nothing is cached; then report the incumbent
    let mean_f = if scored.is_empty() {
        state.best_f
    } else {
        scored.iter().map(|s| s.2).sum::<f64>() / scored.len() as f64
    };
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then_with(|| a.0.cmp(&b.0)));
    if let Some((m, raw, f)) = scored.first() {
        if *f > state.best_f {
            state.best_mask = m.clone();
            state.best_raw = *raw;
            state.best_f = *f;
        }
    }
    if !scored.is_empty() {
        let elites: Vec<PruningMask> = scored
            .iter()
            .take(config.elites)
            .map(|s| s.0.clone())
            .collect();
        let (next, _) = update_elites(&state.dist, &mut state.adam, &elites, config.learn_rate)?;
        state.dist = next;
    }
    state.history.push(HistoryRecord {
        iteration,
        best_f: state.best_f,
        mean_f,
        unique_evals: state.fresh_evals,
        best_cardinality: state.best_mask.cardinality(),
    });
    log::debug!(
        "refine iteration {iteration}: best f = {}, mean f = {mean_f}, evals = {}",
        state.best_f,
        state.fresh_evals
    );
    state.next_iteration += 1;
    Ok(())
}
