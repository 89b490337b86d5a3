//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("singular metric at grid point {index:?}: {detail}")]
    SingularMetric { index: Vec<usize>, detail: String },

    #[error("point {0:?} lies outside the closure of the domain")]
    OutsideDomain(Vec<f64>),

    #[error("|p| = {0} <= 1 is outside the chart of the pure log rotation; use the regularized kind")]
    OutOfChart(f64),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("field support touches the stencil halo: {0}")]
    SupportTouchesHalo(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty active set: {0}")]
    EmptyActiveSet(String),

    #[error("linear solve stopped after {iterations} iterations with relative residual {residual:.3e}")]
    LinearSolveFailed {
        iterations: usize,
        residual: f64,
        history: Vec<f64>,
    },

    #[error("operator is not positive on the active set: {0}")]
    Indefinite(String),

    #[error("nonlinear iteration diverged: {0}; translating or scaling the problem further out usually helps")]
    Diverged(String),

    #[error("collar mask too thin: {0}")]
    CollarMaskTooThin(String),

    #[error("eigenvalue iteration stagnated: {0}")]
    EigenStagnation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("malformed grid dump: {0}")]
    MalformedDump(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code category used by the command-line front end.
    /// 2 = config, 3 = non-convergence, 4 = numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidParameter(_) => 2,
            Error::Diverged(_) | Error::LinearSolveFailed { .. } | Error::EigenStagnation(_) => 3,
            _ => 4,
        }
    }
}
