use std::path::PathBuf;

use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum FdctError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("i/o error at {path}: {message}")]
    Io { path: PathBuf, message: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss in batch {batch_id}")]
    NonFiniteLoss { batch_id: String },
}

impl FdctError {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        FdctError::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }
}

pub type Result<T, E = FdctError> = std::result::Result<T, E>;
