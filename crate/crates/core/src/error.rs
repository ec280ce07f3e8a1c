use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid padding: {0}")]
    InvalidPadding(String),

    #[error("backward called without a matching forward: {0}")]
    MissingForward(String),

    #[error("degenerate input: plane (t={t}, i={i}) sums to {sum:e}")]
    DegenerateInput { t: usize, i: usize, sum: f64 },

    #[error("batch norm `{0}` has no running statistics; train before evaluating")]
    NotCalibrated(String),

    #[error("{}: {message}", path.display())]
    InputError { path: PathBuf, message: String },

    #[error("format error at byte {offset}: {message}")]
    FormatError { offset: u64, message: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
