use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite drift value at node {node} (time {time})")]
    NonFiniteDrift { node: usize, time: f64 },

    #[error("covariance is not positive definite: smallest eigenvalue {min_eigenvalue:e}")]
    NotPositiveDefinite { min_eigenvalue: f64 },

    #[error("degenerate covariance: zero time horizon")]
    Degenerate,

    #[error("flow path covers [{have_lo}, {have_hi}] but [{want_lo}, {want_hi}] was requested")]
    FlowCoverage {
        have_lo: f64,
        have_hi: f64,
        want_lo: f64,
        want_hi: f64,
    },

    #[error("integrability gate violated: {0}")]
    ExponentGate(String),

    #[error("finite-difference step underflow (step {0:e})")]
    StepUnderflow(f64),

    #[error("no surviving paths")]
    NoSurvivingPaths,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by bad inputs rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::DimensionMismatch { .. } | Error::ExponentGate(_)
        )
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
