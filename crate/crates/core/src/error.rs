use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TomoError>;

#[derive(Debug, Error)]
pub enum TomoError {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("deapodization denominator {value:.3e} below threshold {threshold:.3e} at grid point ({row}, {col})")]
    NearZeroDenominator {
        row: usize,
        col: usize,
        value: f64,
        threshold: f64,
    },

    #[error("corrupt cache file {path}: {reason}")]
    CorruptCache { path: PathBuf, reason: String },

    #[error("iterative solver diverged at iteration {iteration}: residual {residual:.3e} exceeds 10x the minimum {minimum:.3e}")]
    DivergenceDetected {
        iteration: usize,
        residual: f64,
        minimum: f64,
    },

    #[error("non-finite value in iterate at iteration {iteration}")]
    NonFiniteValue { iteration: usize },

    #[error("invalid solver configuration: {0}")]
    InvalidConfig(String),

    #[error("flat field must be strictly positive (found {value} at index {index})")]
    InvalidFlatField { index: usize, value: f64 },

    #[error("grid of size {size} exceeds the oracle limit {limit}")]
    GridTooLarge { size: usize, limit: usize },

    #[error("worker failed on slices {start}..{end}: {cause}")]
    WorkerFailure {
        start: usize,
        end: usize,
        cause: String,
    },

    #[error("invalid volume file {path}: {reason}")]
    InvalidVolume { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TomoError {
    pub(crate) fn shape(expected: impl Into<String>, got: impl Into<String>) -> Self {
        TomoError::ShapeMismatch {
            expected: expected.into(),
            got: got.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TomoError::Io {
            path: path.into(),
            source,
        }
    }
}
