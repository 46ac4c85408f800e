//! Error type shared by every module of the crate.

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("enumeration of {size} responses exceeds the cap of {cap}")]
    EnumerationTooLarge { size: u128, cap: usize },

    #[error("{kind} index {index} out of range (len {len})")]
    Index {
        kind: &'static str,
        index: usize,
        len: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("no convergence after {iterations} iterations: {reason}")]
    NonConvergence {
        iterations: usize,
        reason: String,
        /// Objective values of the final iterations, oldest first.
        trace: Vec<f64>,
    },

    #[error("training aborted at step {step}: {reason}")]
    TrainingAborted {
        step: usize,
        reason: String,
        trace: Box<crate::trace::Trace>,
    },

    #[error("snapshot format error: {0}")]
    Snapshot(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn index(kind: &'static str, index: usize, len: usize) -> Self {
        Error::Index { kind, index, len }
    }
}
