use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = MgfError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MgfError {
    #[error("{op}: incompatible shapes {shapes}")]
    Shape { op: &'static str, shapes: String },

    #[error("{op}: {detail}")]
    Domain { op: &'static str, detail: String },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("stale prior version: expected {expected}, current {current}")]
    StaleVersion { expected: u64, current: u64 },

    #[error("training diverged at epoch {epoch}; last good checkpoint is from epoch {}", last_good.epoch)]
    Diverged {
        epoch: usize,
        last_good: Box<crate::training::Checkpoint>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl MgfError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        MgfError::InvalidArgument(msg.into())
    }
}
