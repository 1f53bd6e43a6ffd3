use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by trace handling, policies and the simulator.
#[derive(Debug, Error)]
pub enum Error {
    /// The file could not be decoded; `field` names the first offending field.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    /// A decoded trace breaks one of the attention-trace invariants.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is outside its legal range.
    #[error("parameter error: {0}")]
    Parameter(String),

    /// A mask or plan does not match the trace it is applied to.
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
