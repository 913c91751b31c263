use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingestion { path: PathBuf, reason: String },

    #[error("sampling error: label {label} has no examples in this split")]
    MissingLabel { label: usize },

    #[error("non-finite loss at epoch {epoch}, iteration {iteration}: {detail}")]
    Numeric {
        epoch: usize,
        iteration: usize,
        detail: String,
    },

    #[error("checkpoint error at {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn ingestion(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Ingestion {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn checkpoint(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Fills in the position of a numeric failure; other errors pass through unchanged.
    pub fn at(self, epoch: usize, iteration: usize) -> Self {
        match self {
            Error::Numeric { detail, .. } => Error::Numeric {
                epoch,
                iteration,
                detail,
            },
            other => other,
        }
    }

    /// True for errors caused by user-supplied configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Validation(_))
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}

macro_rules! validation_err {
    ($($arg:tt)*) => { $crate::error::Error::Validation(format!($($arg)*)) };
}

pub(crate) use config_err;
pub(crate) use validation_err;
