use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot:e} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// `uᵀGu` or `uᵀAu` too small relative to `‖u‖²`; the update was skipped.
    #[error("degenerate update direction (curvature {curvature:e})")]
    DegenerateDirection { curvature: f64 },

    /// `sᵀy` below the curvature guard; the secant update was skipped.
    #[error("curvature condition failed: sᵀy = {sy:e}")]
    CurvatureSkip { sy: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("{}:{line}: {reason}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("dataset {0} contains no samples")]
    EmptyDataset(String),

    #[error("invalid experiment spec: {0}")]
    InvalidSpec(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
