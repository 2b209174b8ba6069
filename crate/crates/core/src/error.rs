use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),

    #[error("time index {index} outside [{min}, {max}]")]
    IndexOutOfRange { index: usize, min: usize, max: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("covariance is not positive definite: {0}")]
    SingularCovariance(String),

    #[error("covariances do not commute (max |AB - BA| = {0:.3e})")]
    NonCommutingCovariance(f64),

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("score oracle does not expose an eigenbasis; per-dimension decoding needs one")]
    BasisMismatch,

    #[error("target {target} outside reachable range [{min}, {max}]")]
    TargetOutOfRange { target: f64, min: f64, max: f64 },

    #[error("infeasible (D, P) pair: D = {d}, P = {p}")]
    Infeasible { d: f64, p: f64 },

    #[error("transcript has {got} steps, expected {expected}")]
    TranscriptMismatch { got: usize, expected: usize },

    #[error("transcript step {step} was encoded with a different stream")]
    StreamMismatch { step: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_index(index: usize, min: usize, max: usize) -> Result<()> {
    if index < min || index > max {
        return Err(Error::IndexOutOfRange { index, min, max });
    }
    Ok(())
}
