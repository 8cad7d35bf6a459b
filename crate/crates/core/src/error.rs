use std::io;

use thiserror::Error;

pub type Result<T, E = LrqkError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LrqkError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("SPD solve failed: {0}")]
    SolveFailed(String),

    #[error("rank {rank} exceeds head dimension {dim}")]
    RankTooLarge { rank: usize, dim: usize },

    #[error("token index {index} out of range (cache holds {len} tokens)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("attention over an empty key set")]
    EmptyKeys,

    #[error("window {window} larger than sequence length {len}")]
    WindowTooLarge { window: usize, len: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corrupt trace file: {0}")]
    CorruptTrace(String),

    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u16),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl LrqkError {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        LrqkError::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }
}
