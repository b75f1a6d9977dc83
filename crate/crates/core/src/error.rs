use thiserror::Error;

/// Errors produced by the numerical library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("time index {t} out of range [{lo}, {hi})")]
    TimeOutOfRange { t: usize, lo: usize, hi: usize },

    #[error("not a descent direction: phi'(0) = {0}")]
    NotDescentDirection(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("undefined region: predicted and reference volumes are both zero")]
    UndefinedRegion,

    #[error("fingerprint mismatch: artifact {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
