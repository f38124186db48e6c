use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("missing data: {0}")]
    MissingData(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("problem too large for exhaustive enumeration: n = {n} (max {max})")]
    Size { n: usize, max: usize },

    #[error(
        "could not bracket K = {k_target}: cardinality {cardinality} at gamma = {gamma_hi} \
         after {doublings} doublings"
    )]
    Bracket {
        k_target: usize,
        gamma_hi: f64,
        cardinality: usize,
        doublings: usize,
    },

    #[error("evaluation failed for mask {mask}: {message}")]
    Evaluation { mask: String, message: String },

    #[error("degenerate distribution: {0}")]
    Degenerate(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
