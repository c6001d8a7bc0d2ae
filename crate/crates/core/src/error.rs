use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset {0} contains no interactions")]
    EmptyDataset(PathBuf),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Replicator denominator `xᵀBx` vanished: every payoff in the support is zero.
    #[error("degenerate replicator state: xᵀBx = {0}")]
    Degenerate(f64),

    #[error("constraint vertex for user {target} left the support (x = {value:e})")]
    ConstraintViolation { target: usize, value: f64 },

    #[error("coherence oracle limited to {limit} vertices, got {size}")]
    OracleSize { size: usize, limit: usize },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
