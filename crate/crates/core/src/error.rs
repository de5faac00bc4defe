use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid range [{lo}, {hi})")]
    InvalidRange { lo: f64, hi: f64 },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("plan integrity: {0}")]
    PlanIntegrity(String),

    #[error("cache order: {0}")]
    CacheOrder(String),

    #[error("invalid config at `{path}`: {message}")]
    Validation { path: String, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn validation(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Validation { .. } | Error::InvalidRange { .. } => 2,
            Error::PlanIntegrity(_) | Error::CacheOrder(_) => 3,
            Error::Io { .. } => 4,
            Error::Shape { .. } | Error::Degenerate(_) | Error::NonFinite(_) => 1,
        }
    }
}
