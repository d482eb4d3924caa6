use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

/// Outcome of a single optimizer start, kept for failure reports.
#[derive(Debug, Clone, PartialEq)]
pub struct StartDiagnostics {
    pub start: usize,
    pub iterations: usize,
    pub objective: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("innovation covariance is numerically singular at step {step} (condition number {condition:e})")]
    SingularInnovation { step: usize, condition: f64 },

    #[error("numerical failure at step {step}: {reason}")]
    NumericalFailure { step: usize, reason: String },

    #[error("loading matrix not identified: {0}")]
    Identification(String),

    #[error("estimation failed: {reason}")]
    EstimationFailure {
        reason: String,
        starts: Vec<StartDiagnostics>,
    },

    #[error("particle weights degenerated at step {step}")]
    ParticleDegeneracy { step: usize },

    #[error("parameter prior rejected {rejected} of {attempted} draws")]
    PriorDomain { rejected: usize, attempted: usize },

    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn numerical(step: usize, reason: impl Into<String>) -> Self {
        Error::NumericalFailure {
            step,
            reason: reason.into(),
        }
    }
}
