use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("halfspace projection did not converge after {iterations} iterations (last change {change:.3e})")]
    ProjectionDiverged { iterations: usize, change: f64 },

    #[error("inward normal undefined at interior point (distance to boundary {depth:.3e})")]
    NormalUndefined { depth: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: usize },

    #[error("regression design is rank deficient (pivot ratio {ratio:.3e}); use a positive ridge_lambda")]
    RankDeficient { ratio: f64 },

    #[error("ensemble needs {required} bytes but the memory budget is {budget} bytes; use the streaming estimator (linear-mc) or fewer paths")]
    MemoryBudget { required: u64, budget: u64 },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("derivative check failed for {what} at {at:?}: analytic {analytic:.6e}, finite difference {finite_difference:.6e}")]
    DerivativeMismatch {
        what: &'static str,
        at: Vec<f64>,
        analytic: f64,
        finite_difference: f64,
    },

    #[error("unknown problem '{0}'")]
    UnknownProblem(String),

    #[error("mismatched grids: {0}")]
    GridMismatch(String),

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config field '{field}': {message}")]
    ConfigField { field: String, message: String },

    #[error("row {row} contains a non-finite value in '{field}'")]
    NonFiniteRow { row: usize, field: &'static str },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to build worker pool: {0}")]
    WorkerPool(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
