//! Experiment driver for `dar-core`: configuration files, seeded sweeps,
//! Pareto frontiers, invariant verification and comparison reports.

pub mod algo;
pub mod config;
pub mod pareto;
pub mod report;
pub mod run;
pub mod stats;
pub mod verify;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] dar_core::Error),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed {what}: {message}")]
    Parse { what: String, message: String },
}

impl HarnessError {
    /// Errors a user fixes by editing the configuration or flags.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            HarnessError::Config(_)
                | HarnessError::Core(dar_core::Error::Config(_) | dar_core::Error::Parameter(_))
        )
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
