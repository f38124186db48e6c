//! Command-line driver: build and inspect QUBOs, solve at a fixed pruning
//! count, search coefficients, refine masks and run the whole pipeline.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prunequbo::qubo::{FisherKind, Variant};

/// Exit status for inputs that fail validation.
const EXIT_VALIDATION: u8 = 2;
/// Exit status for bracketing or solver failures.
const EXIT_SOLVER: u8 = 3;
/// Exit status for evaluator failures.
const EXIT_EVALUATOR: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "prunequbo",
    version,
    about = "QUBO-based structured pruning toolkit"
)]
struct Cli {
    /// Worker threads (default: number of processors).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic problem file.
    Synth(commands::SynthArgs),
    /// Assemble a QUBO and write its diagnostic export.
    Build(commands::BuildArgs),
    /// Print a summary of a problem file.
    Inspect(commands::InspectArgs),
    /// Solve with exactly K pruned filters.
    Solve(commands::SolveArgs),
    /// Random search over the weighting coefficients.
    Search(commands::SearchArgs),
    /// Refine a seed mask against an evaluator.
    Refine(commands::RefineArgs),
    /// Run search (or fixed coefficients), solve and refine from a config file.
    Pipeline(commands::PipelineArgs),
}

/// Flags shared by the commands that assemble a QUBO.
#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub problem: PathBuf,
    #[arg(long, default_value = "hybrid")]
    pub variant: Variant,
    #[arg(long, default_value = "none")]
    pub fisher: FisherKind,
    #[arg(long, default_value_t = 1.0)]
    pub alpha_t: f64,
    #[arg(long, default_value_t = 0.0)]
    pub alpha_f: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_diag: f64,
    #[arg(long, default_value_t = 1.0)]
    pub beta_off: f64,
    #[arg(long, default_value_t = 1.0)]
    pub lambda_sim: f64,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use prunequbo::Error;
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Bracket { .. } | Error::Degenerate(_)) => EXIT_SOLVER,
        Some(Error::Evaluation { .. }) => EXIT_EVALUATOR,
        _ => EXIT_VALIDATION,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PRUNEQUBO_LOG", "warn")).init();
    let cli = Cli::parse();
    if cli.sequential {
        prunequbo::exec::set_parallel(false);
    }
    if let Some(threads) = cli.threads {
        if !prunequbo::exec::init_thread_pool(threads) {
            log::warn!("worker pool already initialized; --threads ignored");
        }
    }
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Build(a) => commands::build(&a),
        Command::Inspect(a) => commands::inspect(&a),
        Command::Solve(a) => commands::solve(&a),
        Command::Search(a) => commands::search(&a),
        Command::Refine(a) => commands::refine(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
