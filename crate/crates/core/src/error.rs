use thiserror::Error;

/// Errors raised by the optimal-control laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: &'static str, reason: String },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("Riccati iteration did not converge for system `{system}` (residual {residual:e})")]
    RiccatiNonConvergence { system: String, residual: f64 },

    #[error("matrix `{0}` is not symmetric positive definite")]
    NotSpd(&'static str),

    #[error("closed loop of `{0}` is not stable; linearization is not stabilizable with this weighting")]
    NotStabilizable(String),

    #[error("operation expects a {expected} CLF but got a {actual} one")]
    KindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("operation expects a {expected} cost specification, got {actual}")]
    VariantMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("empty set: {0}")]
    EmptySet(&'static str),

    #[error("trajectory is missing field `{field}` required by mode {mode}")]
    MissingField { mode: &'static str, field: &'static str },

    #[error("malformed field file: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        field,
        reason: reason.into(),
    }
}
