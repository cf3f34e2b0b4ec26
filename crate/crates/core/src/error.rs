use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
///
/// The variants follow the caller-facing classes used throughout the crate:
/// shape and index problems are usage errors, invalid numeric inputs are
/// domain errors, and iterative procedures report their own failure modes.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("diverged at step {step}: {reason}")]
    Divergence {
        step: usize,
        reason: String,
        /// Last finite state before the failure.
        last_stable: Vec<f64>,
    },
    #[error("linear solver did not converge after {iterations} iterations (residual {})",
        .residuals.last().copied().unwrap_or(f64::NAN))]
    SolverNonConvergence {
        iterations: usize,
        residuals: Vec<f64>,
    },
    #[error("decay fit failed: r2 = {r2}")]
    FitFailed { r2: f64 },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

pub(crate) fn usage(msg: impl Into<String>) -> Error {
    Error::Usage(msg.into())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
