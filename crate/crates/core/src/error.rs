use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("domain error: {0}")]
    DomainError(String),
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("backward requires a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("degenerate normalization: {0}")]
    DegenerateNorm(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("expected 5 stage predictions, got {0}")]
    InvalidStageCount(usize),
    #[error("mask is not binary: {0}")]
    InvalidMask(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),
    #[error("cannot decode image {}: {reason}", path.display())]
    CorruptImage { path: PathBuf, reason: String },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
