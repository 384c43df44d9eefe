use thiserror::Error;

use crate::gp::KernelParams;
use crate::vehicle::ControlInput;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("kernel matrix not positive definite after jitter {jitter:e}")]
    SingularKernel { jitter: f64 },

    #[error("hyperparameter fitting failed: likelihood non-finite at every start")]
    FittingFailed { best: KernelParams },

    #[error("posterior covariance indefinite after jitter {jitter:e}")]
    DegenerateEntropy { jitter: f64 },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("subproblem build failed: {0}")]
    Build(String),

    #[error("SCP solver stalled: no subproblem was solved in {iterations} iterations")]
    SolverStalled {
        iterations: usize,
        warm_start: Vec<ControlInput>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
