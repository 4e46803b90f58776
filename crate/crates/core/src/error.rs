use thiserror::Error;

use crate::stats::Trajectory;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    /// Exponential evaluation would overflow; `safe_horizon` is the largest
    /// admissible time.
    #[error("range error: t = {t} exceeds safe horizon {safe_horizon}")]
    Range { t: f64, safe_horizon: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("degenerate spectrum: {0}")]
    DegenerateSpectrum(String),

    #[error("unsupported exponent a = {0} (mesoscopic regime needs a > 1)")]
    UnsupportedExponent(f64),

    #[error("step too large: {0}")]
    StepTooLarge(String),

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    /// Non-finite state during integration. Carries the records collected
    /// before the blow-up.
    #[error("divergence at step {step} (t = {t}); reduce the step size")]
    Divergence {
        step: u64,
        t: f64,
        partial: Box<Trajectory>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn check_dims(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(invalid(format!(
            "{what}: expected length {expected}, got {got}"
        )));
    }
    Ok(())
}
