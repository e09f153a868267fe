use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LatseError>;

#[derive(Debug, Error)]
pub enum LatseError {
    #[error("angle {0} rad is outside [0, pi]")]
    AngleDomain(f64),

    #[error("invalid margin spec: {0}")]
    InvalidSpec(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("degenerate embedding at row {row}: pre-normalization length {length:e}")]
    DegenerateEmbedding { row: usize, length: f64 },

    #[error("identity mismatch: target holds {expected}, sample belongs to {found}")]
    IdentityMismatch { expected: usize, found: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {what} = {value}")]
    Diverged {
        iteration: usize,
        what: &'static str,
        value: f64,
    },

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl LatseError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LatseError::Diverged { .. } => 2,
            LatseError::GradCheck(_) => 3,
            _ => 1,
        }
    }
}
