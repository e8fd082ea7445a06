use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PmoeError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: String, reason: String },

    #[error("training diverged at task {task}, step {step}: loss = {loss}")]
    Diverged { task: usize, step: usize, loss: f64 },

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("checkpoint inconsistent: {0}")]
    Consistency(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl PmoeError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, PmoeError>;
