//! Crate-wide error type and process exit-code mapping.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid configuration: bad hyperparameter, unknown preset, malformed
    /// config file, mismatched model/checkpoint settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// Tensor shape violation detected at runtime.
    #[error("shape error: {0}")]
    Shape(String),

    /// Dataset problems: missing files, bad masks, infeasible generator
    /// settings.
    #[error("data error: {0}")]
    Data(String),

    /// Non-finite losses or other numeric breakdowns during training.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code contract: 0 success, 2 config error, 3 data error,
    /// 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Io { .. } | Error::Checkpoint(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}
