//! Pipeline configuration file (JSON, like the problem file).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use prunequbo::anneal::AnnealConfig;
use prunequbo::capacity::CapacitySearchConfig;
use prunequbo::qubo::{CoefficientSet, Variant};
use prunequbo::refine::RefineConfig;
use prunequbo::search::SearchSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Problem file, relative to the config file.
    pub problem: PathBuf,
    pub variant: Variant,
    pub k_target: usize,
    /// Fixed coefficients; ignored when `search` is present.
    #[serde(default)]
    pub coefficients: CoefficientSet,
    #[serde(default)]
    pub search: Option<SearchSettings>,
    #[serde(default)]
    pub anneal: AnnealSettings,
    #[serde(default)]
    pub capacity: CapacitySettings,
    #[serde(default)]
    pub refine: RefineSettings,
    /// `separable`, `qubo`, `cmd:<command line>` or `session:<command line>`.
    #[serde(default = "default_evaluator")]
    pub evaluator: String,
    /// Evaluator used to score search trials; defaults to `qubo`.
    #[serde(default = "default_proxy")]
    pub proxy_evaluator: String,
    #[serde(default)]
    pub evaluator_timeout_secs: Option<f64>,
    /// Output directory, relative to the config file.
    pub out_dir: PathBuf,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_evaluator() -> String {
    "qubo".into()
}

fn default_proxy() -> String {
    "qubo".into()
}

fn default_seed() -> u64 {
    123
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSettings {
    pub trials: usize,
    #[serde(default)]
    pub space: SearchSpace,
    /// Coefficient names for the landscape table.
    #[serde(default = "default_axes")]
    pub axes: (String, String),
}

fn default_axes() -> (String, String) {
    ("alpha_t".into(), "beta_off".into())
}

/// Annealer settings without a seed; the global seed is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnnealSettings {
    pub num_reads: usize,
    pub sweeps_per_read: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub schedule: prunequbo::anneal::Schedule,
}

impl Default for AnnealSettings {
    fn default() -> Self {
        let d = AnnealConfig::default();
        Self {
            num_reads: d.num_reads,
            sweeps_per_read: d.sweeps_per_read,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            schedule: d.schedule,
        }
    }
}

impl AnnealSettings {
    pub fn resolve(&self, seed: u64) -> AnnealConfig {
        AnnealConfig {
            num_reads: self.num_reads,
            sweeps_per_read: self.sweeps_per_read,
            beta_start: self.beta_start,
            beta_end: self.beta_end,
            schedule: self.schedule,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapacitySettings {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub reads_search: usize,
}

impl Default for CapacitySettings {
    fn default() -> Self {
        let d = CapacitySearchConfig::new(1);
        Self {
            gamma_lo: d.gamma_lo,
            gamma_hi: d.gamma_hi,
            tol: d.tol,
            max_iters: d.max_iters,
            reads_search: d.reads_search,
        }
    }
}

impl CapacitySettings {
    /// The final solve uses the annealer's read count.
    pub fn resolve(&self, k_target: usize, reads_final: usize) -> CapacitySearchConfig {
        CapacitySearchConfig {
            k_target,
            gamma_lo: self.gamma_lo,
            gamma_hi: self.gamma_hi,
            tol: self.tol,
            max_iters: self.max_iters,
            reads_search: self.reads_search,
            reads_final,
        }
    }
}

/// Refinement settings without a seed; the global seed is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSettings {
    pub budget: usize,
    pub batch: usize,
    pub elites: usize,
    pub learn_rate: f64,
    pub rank: usize,
    pub epsilon: f64,
    pub mutations: usize,
    pub seed_inject_iters: usize,
    pub lambda_card: f64,
}

impl Default for RefineSettings {
    fn default() -> Self {
        let d = RefineConfig::default();
        Self {
            budget: d.budget,
            batch: d.batch,
            elites: d.elites,
            learn_rate: d.learn_rate,
            rank: d.rank,
            epsilon: d.epsilon,
            mutations: d.mutations,
            seed_inject_iters: d.seed_inject_iters,
            lambda_card: d.lambda_card,
        }
    }
}

impl RefineSettings {
    pub fn resolve(&self, seed: u64) -> RefineConfig {
        RefineConfig {
            budget: self.budget,
            batch: self.batch,
            elites: self.elites,
            learn_rate: self.learn_rate,
            rank: self.rank,
            epsilon: self.epsilon,
            mutations: self.mutations,
            seed_inject_iters: self.seed_inject_iters,
            lambda_card: self.lambda_card,
            seed,
        }
    }
}

impl PipelineConfig {
    /// Loads the config and resolves its paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| prunequbo::Error::Parse {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        cfg.problem = base.join(&cfg.problem);
        cfg.out_dir = base.join(&cfg.out_dir);
        if !cfg.problem.exists() {
            bail!(prunequbo::Error::Validation(format!(
                "problem file {} does not exist",
                cfg.problem.display()
            )));
        }
        Ok(cfg)
    }
}
