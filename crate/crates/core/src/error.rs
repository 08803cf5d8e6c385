use std::io;

use thiserror::Error;

/// Errors produced by the EFM library.
#[derive(Debug, Error)]
pub enum EfmError {
    #[error("schema error: {0}")]
    Schema(String),

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("unseen level {value:?} for attribute {attribute:?}")]
    UnseenLevel { attribute: String, value: String },

    #[error("cannot form {bins} bins from {distinct} distinct values")]
    DegenerateBinning { bins: usize, distinct: usize },

    #[error("split error: {0}")]
    Split(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("missing parameter: {0}")]
    MissingParameter(String),

    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("non-positive actual value {value} at position {index}")]
    NonPositiveActual { index: usize, value: f64 },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("training diverged at iteration {iteration} (eta = {eta:e})")]
    Divergence { iteration: usize, eta: f64 },

    #[error("key mismatch: {0}")]
    KeyMismatch(String),

    #[error("grid minimization did not converge: {0}")]
    GridNonConvergence(String),

    #[error("degenerate design: {0}")]
    DegenerateDesign(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl EfmError {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            EfmError::Divergence { .. } => 3,
            EfmError::Config(_) => 4,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, EfmError>;
