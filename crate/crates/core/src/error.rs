//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite logits")]
    NonFiniteLogits,

    #[error("empty batch")]
    EmptyBatch,

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("step after max_iter")]
    StepAfterMaxIter,

    #[error("partition denominator {denominator} exceeds dataset size {size}")]
    PartitionTooSmall { denominator: usize, size: usize },

    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
