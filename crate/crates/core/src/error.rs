use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, lengths, ranges).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or likelihood term evaluated to NaN or infinity.
    #[error("non-finite value in term `{term}`: {value}")]
    Numeric { term: String, value: f64 },

    /// A generated system failed one of the identifiability checks.
    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported size: {0}")]
    Unsupported(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file: {message}")]
    Parse { path: PathBuf, message: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}

/// Fails with [`Error::Numeric`] unless `value` is finite.
pub fn ensure_finite(term: &str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            term: term.to_string(),
            value,
        })
    }
}
