//! Subcommand implementations.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use prunequbo::anneal::AnnealConfig;
use prunequbo::capacity::{solve_with_cardinality, CapacitySearchConfig, CapacitySolution};
use prunequbo::objective::{penalized, ExternalMode, ExternalSpec, ObjectiveHandle};
use prunequbo::problem::{load_problem, save_problem, synth_problem, PruningMask, PruningProblem};
use prunequbo::qubo::{assemble_qubo, CoefficientSet, FisherKind, Variant};
use prunequbo::refine::{self, RefineConfig, RefineOutcome, RefineState};
use prunequbo::search::{landscape_csv, random_search, SearchConfig, SearchSpace};
use prunequbo::Error;

use crate::config::PipelineConfig;
use crate::output::{to_pretty_json, OutputDir};
use crate::ModelArgs;

impl ModelArgs {
    fn coefficients(&self, gamma: f64) -> CoefficientSet {
        CoefficientSet {
            alpha_t: self.alpha_t,
            alpha_f: self.alpha_f,
            beta_diag: self.beta_diag,
            beta_off: self.beta_off,
            lambda_sim: self.lambda_sim,
            gamma,
            fisher_kind: self.fisher,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 123)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let problem = synth_problem(args.n, args.layers, args.seed)?;
    save_problem(&problem, &args.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f64,
    /// Export file to write.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn build(args: &BuildArgs) -> Result<()> {
    let problem = load_problem(&args.model.problem)?;
    let q = assemble_qubo(
        &problem,
        &args.model.coefficients(args.gamma),
        args.model.variant,
    )?;
    q.save_export(&args.out)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub problem: PathBuf,
}

#[derive(Serialize)]
struct ProblemSummary {
    n: usize,
    total_params: u64,
    layers: Vec<LayerSummary>,
    has_fisher_w: bool,
    has_fisher_c: bool,
    metadata: std::collections::BTreeMap<String, String>,
}

#[derive(Serialize)]
struct LayerSummary {
    layer: usize,
    filters: usize,
    params: u64,
    similarity: bool,
}

pub fn inspect(args: &InspectArgs) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let filters = problem.filters();
    let layers = problem
        .layers()
        .iter()
        .map(|(&layer, members)| LayerSummary {
            layer,
            filters: members.len(),
            params: members.iter().map(|&i| filters[i].param_count).sum(),
            similarity: problem.similarity_for(layer).is_some(),
        })
        .collect();
    let summary = ProblemSummary {
        n: problem.n(),
        total_params: filters.iter().map(|f| f.param_count).sum(),
        layers,
        has_fisher_w: problem.fisher_w_scores().is_some(),
        has_fisher_c: problem.fisher_c_scores().is_some(),
        metadata: problem.metadata().clone(),
    };
    print!("{}", to_pretty_json(&summary));
    Ok(())
}

/// Annealer and capacity-search flags.
#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value_t = 123)]
    pub seed: u64,
    /// Reads for the final solve.
    #[arg(long, default_value_t = 100)]
    pub reads: usize,
    /// Reads per solve during the γ search.
    #[arg(long, default_value_t = 15)]
    pub search_reads: usize,
    #[arg(long, default_value_t = 1000)]
    pub sweeps: usize,
}

impl SolverArgs {
    fn anneal(&self) -> AnnealConfig {
        AnnealConfig {
            num_reads: self.reads,
            sweeps_per_read: self.sweeps,
            seed: self.seed,
            ..AnnealConfig::default()
        }
    }

    fn capacity(&self) -> CapacitySearchConfig {
        CapacitySearchConfig {
            reads_search: self.search_reads,
            reads_final: self.reads,
            ..CapacitySearchConfig::new(self.k)
        }
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize)]
struct SolveReport<'a> {
    mask: &'a PruningMask,
    n: usize,
    cardinality: usize,
    k_target: usize,
    variant: Variant,
    coefficients: CoefficientSet,
    gamma_final: f64,
    energy: f64,
    repaired: bool,
}

fn write_solution(
    out: &mut OutputDir,
    prefix: &str,
    variant: Variant,
    coeffs: &CoefficientSet,
    k: usize,
    sol: &CapacitySolution,
) -> Result<()> {
    let report = SolveReport {
        mask: &sol.mask,
        n: sol.mask.len(),
        cardinality: sol.mask.cardinality(),
        k_target: k,
        variant,
        coefficients: coeffs.with_gamma(sol.gamma_final),
        gamma_final: sol.gamma_final,
        energy: sol.energy,
        repaired: sol.repaired,
    };
    out.write_json(&format!("{prefix}mask.json"), &report)?;
    out.write_json_lines(&format!("{prefix}trace.jsonl"), &sol.trace)?;
    Ok(())
}

pub fn solve(args: &SolveArgs) -> Result<()> {
    let problem = load_problem(&args.model.problem)?;
    let coeffs = args.model.coefficients(0.0);
    let sol = solve_with_cardinality(
        &problem,
        &coeffs,
        args.model.variant,
        &args.solver.capacity(),
        &args.solver.anneal(),
    )?;
    let mut out = OutputDir::create(&args.out)?;
    write_solution(
        &mut out,
        "",
        args.model.variant,
        &coeffs,
        args.solver.k,
        &sol,
    )?;
    Ok(())
}

/// Builds an evaluator from its textual spec.
///
/// * `separable`: minus the summed L1 scores of the pruned filters;
/// * `qubo`: minus the energy of the variant's QUBO at default coefficients and γ = 0;
/// * `cmd:<command line>`: one process per evaluation;
/// * `session:<command line>`: one long-lived process speaking the session protocol.
pub fn make_evaluator(
    spec: &str,
    problem: &PruningProblem,
    variant: Variant,
    fisher: FisherKind,
    timeout_secs: Option<f64>,
) -> Result<ObjectiveHandle> {
    let external = |command: &str, mode: ExternalMode| -> Result<ObjectiveHandle> {
        let words: Vec<String> = command.split_whitespace().map(str::to_string).collect();
        if words.is_empty() {
            bail!(Error::Argument(format!(
                "evaluator {spec:?} has an empty command"
            )));
        }
        let mut ext = ExternalSpec::new(words);
        ext.mode = mode;
        if let Some(t) = timeout_secs {
            ext.timeout_secs = t;
        }
        Ok(ObjectiveHandle::external(ext, problem.n()))
    };
    if let Some(command) = spec.strip_prefix("cmd:") {
        return external(command, ExternalMode::OneShot);
    }
    if let Some(command) = spec.strip_prefix("session:") {
        return external(command, ExternalMode::Session);
    }
    match spec {
        "separable" => Ok(ObjectiveHandle::separable(
            problem.l1_scores().iter().map(|s| -s).collect(),
        )),
        "qubo" => {
            let reference = CoefficientSet {
                fisher_kind: fisher,
                ..CoefficientSet::default()
            };
            Ok(ObjectiveHandle::qubo_energy(assemble_qubo(problem, &reference, variant)?))
        }
        other => bail!(Error::Argument(format!(
            "unknown evaluator {other:?}; expected separable, qubo, cmd:<command> or session:<command>"
        ))),
    }
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(long, default_value_t = 50)]
    pub trials: usize,
    /// Proxy evaluator scoring each trial's mask.
    #[arg(long, default_value = "qubo")]
    pub evaluator: String,
    /// Search space as JSON; defaults to [1e-3, 1e2] log-uniform for every coefficient.
    #[arg(long)]
    pub space: Option<PathBuf>,
    /// Landscape axes as `name,name`.
    #[arg(long, default_value = "alpha_t,beta_off")]
    pub axes: String,
    #[arg(long)]
    pub eval_timeout: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

fn load_space(path: Option<&Path>, fisher: FisherKind) -> Result<SearchSpace> {
    let mut space = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading search space {}", p.display()))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.to_path_buf(),
                message: e.to_string(),
            })?
        }
        None => SearchSpace::default(),
    };
    if path.is_none() {
        space.template.fisher_kind = fisher;
    }
    Ok(space)
}

fn parse_axes(text: &str) -> Result<(String, String)> {
    match text.split_once(',') {
        Some((a, b)) => Ok((a.trim().to_string(), b.trim().to_string())),
        None => bail!(Error::Argument(format!(
            "axes must be `name,name`, got {text:?}"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_search(
    out: &mut OutputDir,
    prefix: &str,
    problem: &PruningProblem,
    variant: Variant,
    space: &SearchSpace,
    config: &SearchConfig,
    k: usize,
    evaluator: &ObjectiveHandle,
    axes: &(String, String),
) -> Result<CoefficientSet> {
    let outcome = random_search(problem, variant, space, k, config, evaluator)?;
    out.write_json_lines(&format!("{prefix}ledger.jsonl"), &outcome.trials)?;
    out.write_text(
        &format!("{prefix}landscape.csv"),
        &landscape_csv(&outcome.trials, (&axes.0, &axes.1))?,
    )?;
    out.write_json(&format!("{prefix}best.json"), &outcome.best)?;
    if !outcome.best.succeeded() {
        bail!(Error::Bracket {
            k_target: k,
            gamma_hi: f64::NAN,
            cardinality: 0,
            doublings: prunequbo::capacity::MAX_DOUBLINGS,
        });
    }
    Ok(outcome.best.coeffs)
}

pub fn search(args: &SearchArgs) -> Result<()> {
    let problem = load_problem(&args.model.problem)?;
    let space = load_space(args.space.as_deref(), args.model.fisher)?;
    let axes = parse_axes(&args.axes)?;
    let evaluator = make_evaluator(
        &args.evaluator,
        &problem,
        args.model.variant,
        args.model.fisher,
        args.eval_timeout,
    )?;
    let config = SearchConfig {
        n_trials: args.trials,
        capacity: args.solver.capacity(),
        anneal: args.solver.anneal(),
        seed: args.solver.seed,
    };
    let mut out = OutputDir::create(&args.out)?;
    run_search(
        &mut out,
        "",
        &problem,
        args.model.variant,
        &space,
        &config,
        args.solver.k,
        &evaluator,
        &axes,
    )?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    #[arg(long)]
    pub problem: PathBuf,
    /// Seed mask: a mask JSON file with a `mask` field, or a bare bit string.
    #[arg(long)]
    pub seed_mask: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long, default_value = "qubo")]
    pub evaluator: String,
    /// Variant used by the `qubo` evaluator.
    #[arg(long, default_value = "hybrid")]
    pub variant: Variant,
    #[arg(long, default_value = "none")]
    pub fisher: FisherKind,
    #[arg(long, default_value_t = 123)]
    pub seed: u64,
    #[arg(long, default_value_t = 20_000)]
    pub budget: usize,
    #[arg(long, default_value_t = 300)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub elites: usize,
    #[arg(long, default_value_t = 10)]
    pub rank: usize,
    #[arg(long, default_value_t = 0.02)]
    pub learn_rate: f64,
    #[arg(long, default_value_t = 0.03)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_card: f64,
    #[arg(long)]
    pub eval_timeout: Option<f64>,
    /// Checkpoint written after every iteration.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Continue from `--checkpoint` instead of starting over.
    #[arg(long, requires = "checkpoint")]
    pub resume: bool,
    #[arg(long)]
    pub out: PathBuf,
}

fn read_mask(path: &Path) -> Result<PruningMask> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading mask {}", path.display()))?;
    let trimmed = text.trim();
    if trimmed.starts_with('{') {
        let value: serde_json::Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let bits = value
            .get("mask")
            .and_then(|m| m.as_str())
            .ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                message: "no string field `mask`".into(),
            })?;
        Ok(PruningMask::parse(bits)?)
    } else {
        Ok(PruningMask::parse(trimmed)?)
    }
}

#[derive(Serialize)]
struct RefineReport<'a> {
    mask: &'a PruningMask,
    n: usize,
    cardinality: usize,
    k_target: usize,
    raw_metric: f64,
    penalized: f64,
    seed_mask: &'a PruningMask,
    seed_raw_metric: f64,
    seed_penalized: f64,
    unique_evaluations: usize,
    config: &'a RefineConfig,
}

fn write_refinement(out: &mut OutputDir, prefix: &str, k: usize, r: &RefineOutcome) -> Result<()> {
    let report = RefineReport {
        mask: &r.best_mask,
        n: r.best_mask.len(),
        cardinality: r.best_mask.cardinality(),
        k_target: k,
        raw_metric: r.best_raw,
        penalized: r.best_f,
        seed_mask: &r.state.seed_mask,
        seed_raw_metric: r.seed_raw,
        seed_penalized: r.seed_f,
        unique_evaluations: r.fresh_evals,
        config: &r.state.config,
    };
    out.write_json(&format!("{prefix}refined.json"), &report)?;
    out.write_json_lines(&format!("{prefix}history.jsonl"), &r.history)?;
    Ok(())
}

pub fn refine(args: &RefineArgs) -> Result<()> {
    let problem = load_problem(&args.problem)?;
    let seed_mask = read_mask(&args.seed_mask)?;
    let evaluator = make_evaluator(
        &args.evaluator,
        &problem,
        args.variant,
        args.fisher,
        args.eval_timeout,
    )?;
    let config = RefineConfig {
        budget: args.budget,
        batch: args.batch,
        elites: args.elites,
        rank: args.rank,
        learn_rate: args.learn_rate,
        epsilon: args.epsilon,
        lambda_card: args.lambda_card,
        seed: args.seed,
        ..RefineConfig::default()
    };
    let state = if args.resume {
        let path = args
            .checkpoint
            .as_ref()
            .expect("clap enforces --checkpoint");
        let state = RefineState::load(path)?;
        if state.seed_mask != seed_mask || state.k_target != args.k || state.config != config {
            bail!(Error::Validation(format!(
                "checkpoint {} was written for a different seed mask, K or configuration",
                path.display()
            )));
        }
        state
    } else {
        refine::start(&seed_mask, &evaluator, args.k, &config)?
    };
    let outcome = refine::run(state, &evaluator, args.checkpoint.as_deref())?;
    let mut out = OutputDir::create(&args.out)?;
    write_refinement(&mut out, "", args.k, &outcome)?;
    Ok(())
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Serialize)]
struct StageScore<'a> {
    mask: &'a PruningMask,
    cardinality: usize,
    raw_metric: f64,
    penalized: f64,
}

#[derive(Serialize)]
struct PipelineSummary<'a> {
    n: usize,
    k_target: usize,
    variant: Variant,
    coefficients: CoefficientSet,
    gamma_final: f64,
    qubo_stage: StageScore<'a>,
    refined: StageScore<'a>,
}

pub fn pipeline(args: &PipelineArgs) -> Result<()> {
    let cfg = PipelineConfig::load(&args.config)?;
    let problem = load_problem(&cfg.problem)?;
    let k = cfg.k_target;
    if k < 1 || k >= problem.n() {
        bail!(Error::Validation(format!(
            "k_target = {k} must lie in [1, {}]",
            problem.n() - 1
        )));
    }
    let anneal = cfg.anneal.resolve(cfg.seed);
    let capacity = cfg.capacity.resolve(k, anneal.num_reads);
    let mut out = OutputDir::create(&cfg.out_dir)?;

    let coeffs = match &cfg.search {
        Some(search) => {
            let proxy = make_evaluator(
                &cfg.proxy_evaluator,
                &problem,
                cfg.variant,
                search.space.template.fisher_kind,
                cfg.evaluator_timeout_secs,
            )?;
            let config = SearchConfig {
                n_trials: search.trials,
                capacity: capacity.clone(),
                anneal: anneal.clone(),
                seed: cfg.seed,
            };
            run_search(
                &mut out,
                "search_",
                &problem,
                cfg.variant,
                &search.space,
                &config,
                k,
                &proxy,
                &search.axes,
            )?
        }
        None => cfg.coefficients,
    };

    let sol = solve_with_cardinality(&problem, &coeffs, cfg.variant, &capacity, &anneal)?;
    write_solution(&mut out, "qubo_", cfg.variant, &coeffs, k, &sol)?;

    let evaluator = make_evaluator(
        &cfg.evaluator,
        &problem,
        cfg.variant,
        coeffs.fisher_kind,
        cfg.evaluator_timeout_secs,
    )?;
    let refine_cfg = cfg.refine.resolve(cfg.seed);
    let outcome = refine::refine(&sol.mask, &evaluator, k, &refine_cfg)?;
    write_refinement(&mut out, "", k, &outcome)?;

    let summary = PipelineSummary {
        n: problem.n(),
        k_target: k,
        variant: cfg.variant,
        coefficients: coeffs,
        gamma_final: sol.gamma_final,
        qubo_stage: StageScore {
            mask: &sol.mask,
            cardinality: sol.mask.cardinality(),
            raw_metric: outcome.seed_raw,
            penalized: penalized(
                outcome.seed_raw,
                sol.mask.cardinality(),
                k,
                refine_cfg.lambda_card,
            ),
        },
        refined: StageScore {
            mask: &outcome.best_mask,
            cardinality: outcome.best_mask.cardinality(),
            raw_metric: outcome.best_raw,
            penalized: outcome.best_f,
        },
    };
    out.write_json("summary.json", &summary)?;
    out.write_manifest()?;
    Ok(())
}
