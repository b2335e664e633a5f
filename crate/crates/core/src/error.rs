use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward: {0}")]
    Backward(String),

    #[error("matrix is not a rotation (|R^T R - I| = {deviation:.3e})")]
    NotRotation { deviation: f64 },

    #[error("degenerate state: vehicle and load coincide (separation {separation:.3e} m)")]
    DegenerateState { separation: f64 },

    #[error("rollout failed at step {index}: {source}")]
    Step {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("invalid parameter: {0}")]
    InvalidParams(String),

    #[error("{path}:{line}: {message}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: non-uniform timestamps at line {line} (step {found:.6} s, expected {expected:.6} s)")]
    NonUniformTimestamps {
        path: PathBuf,
        line: usize,
        found: f64,
        expected: f64,
    },

    #[error("{path}:{line}: quaternion norm {norm:.6} is outside tolerance")]
    QuaternionNorm {
        path: PathBuf,
        line: usize,
        norm: f64,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("synthetic controller diverged on trajectory {trajectory} (seed {seed}) at step {step}")]
    ControllerDivergence {
        trajectory: String,
        seed: u64,
        step: usize,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn at_step(index: usize, source: Error) -> Self {
        Error::Step {
            index,
            source: Box::new(source),
        }
    }

    /// True for errors caused by numeric blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::Divergence(_) | Error::ControllerDivergence { .. } => {
                true
            }
            Error::Step { source, .. } => source.is_numeric(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
