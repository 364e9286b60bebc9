//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid permutation {perm:?} for rank {rank}")]
    InvalidPermutation { perm: Vec<usize>, rank: usize },

    #[error("backward root is not scalar and no seed gradient was supplied")]
    MissingSeed,

    #[error("invalid scan ordering: {0}")]
    InvalidOrdering(String),

    #[error("delta must be strictly positive, got {0}")]
    InvalidDelta(f64),

    #[error("scan boundary {position} out of range [1, {len})")]
    InvalidBoundary { position: usize, len: usize },

    #[error("inner width {width} not divisible by {heads} heads")]
    HeadSplit { width: usize, heads: usize },

    #[error("invalid layer arrangement: {0}")]
    Arrangement(String),

    #[error("factorization policy error: {0}")]
    Factorization(String),

    #[error("patch error: extent {extent} not divisible by patch size {patch}")]
    Patch { extent: usize, patch: usize },

    #[error("unknown policy: {0}")]
    Policy(String),

    #[error("inflation error: {0}")]
    Inflate(String),

    #[error("unknown synthetic task: {0}")]
    Task(String),

    #[error("probe index {index} out of range for {len} positions")]
    ProbeOutOfRange { index: usize, len: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }
}
