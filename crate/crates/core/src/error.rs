use thiserror::Error;

/// Errors produced by the traverse-core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("insufficient frames: need at least {needed}, got {got}")]
    InsufficientFrames { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("out of bounds: {0}")]
    OutOfBounds(String),

    #[error("no path from {start:?} to {goal:?}")]
    NoPath { start: [usize; 2], goal: [usize; 2] },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    #[error("denoiser failed: {0}")]
    Denoiser(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
