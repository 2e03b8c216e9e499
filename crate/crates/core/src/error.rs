use thiserror::Error;

/// Errors surfaced by the solvers and estimators.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    /// A non-finite value showed up mid-computation. `path` identifies the
    /// offending sample path when known.
    #[error("numeric failure at path {path:?}: {context}")]
    NumericFailure {
        context: String,
        path: Option<usize>,
    },

    /// The normal equations at one time step were too ill-conditioned to solve.
    #[error("regression failure at time step {step}: condition number {cond:.3e} exceeds limit")]
    RegressionFailure { step: usize, cond: f64 },

    /// A declared bound (on coefficients, on the obstacle, ...) was violated by
    /// the sampled data, so the closed-form sensitivity does not apply.
    #[error("assumption violation: {0}")]
    AssumptionViolation(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// Stable short name of the variant, used for error columns in outputs.
    pub fn name(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::InvalidState(_) => "invalid_state",
            Error::NumericFailure { .. } => "numeric_failure",
            Error::RegressionFailure { .. } => "regression_failure",
            Error::AssumptionViolation(_) => "assumption_violation",
            Error::Config(_) => "config_error",
            Error::Io(_) => "io_error",
        }
    }
}
