use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Dimensions, ranges or settings that violate a type invariant.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller passed inputs that are well-typed but not acceptable for the operation.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("adaptation diverged at step {step}")]
    AdaptationDiverged { step: usize },

    #[error("all {samples} inner samples diverged at outer step {step}")]
    AllInnerDiverged { step: usize, samples: usize },

    #[error("outer step {step} failed: {source}")]
    OuterStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle does not support this configuration: {0}")]
    OracleUnsupported(String),

    #[error("oracle failed: {0}")]
    Oracle(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
