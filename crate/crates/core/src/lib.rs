//! Structured filter pruning as cardinality-constrained binary optimization.
//!
//! A [`PruningProblem`] holds per-filter statistics (magnitude, Taylor and
//! Fisher importance, parameter counts, per-layer activation similarity).
//! [`qubo::assemble_qubo`] turns it into a normalized QUBO, the
//! [`capacity`] search finds a capacity incentive that makes a simulated
//! annealing solution prune exactly `K` filters, and [`refine`] improves
//! that mask against an arbitrary black-box metric with a tensor-train
//! sampling optimizer.
//!
//! Parallel sections (annealing reads, trials, batch evaluation) run on
//! rayon when the `parallel` feature is enabled and can be switched off at
//! runtime through [`exec`].

pub mod anneal;
pub mod capacity;
pub mod error;
pub mod exec;
pub mod objective;
pub mod problem;
pub mod qubo;
pub mod refine;
pub mod rng;
pub mod search;
pub mod tt;

pub use anneal::{anneal, brute_force, AnnealConfig, Schedule, SolveResult};
pub use capacity::{repair_mask, solve_with_cardinality, CapacitySearchConfig, CapacitySolution};
pub use error::{Error, Result};
pub use objective::{EvalCache, Objective, ObjectiveHandle};
pub use problem::{FilterRecord, PruningMask, PruningProblem, SimilarityBlock};
pub use qubo::{assemble_qubo, CoefficientSet, FisherKind, QuboMatrix, Variant};
pub use refine::{refine, RefineConfig, RefineOutcome};
pub use search::{random_search, SearchConfig, SearchSpace, TrialRecord};
pub use tt::TtDistribution;
