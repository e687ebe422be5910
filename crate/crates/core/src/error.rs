//! Error type shared by every stage of the pipeline.

use std::io;
use thiserror::Error;

/// Errors raised by ingestion, bagging, the model and the training loop.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed log line: {0}")]
    MalformedLine(String),
    #[error("invalid embedding dimension {0} (must be >= 2)")]
    InvalidDimension(usize),
    #[error("empty input")]
    EmptyInput,
    #[error("invalid window: W={window}, stride={stride}")]
    InvalidWindow { window: usize, stride: usize },
    #[error("too few bags to split: {0} (need at least 3)")]
    TooFewBags(usize),
    #[error("invalid split ratios: {0}")]
    InvalidRatios(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate vector: norm below floor at row {0}")]
    DegenerateVector(usize),
    #[error("invalid instance index {index} (valid positions: {valid})")]
    InvalidIndex { index: usize, valid: usize },
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("only one class present")]
    SingleClass,
    #[error("no positive bags")]
    NoPositiveBags,
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
