use alloc::string::String;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside the domain of the operation.
    Domain(String),
    /// Two inputs that must agree in length or shape did not.
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    /// Cholesky factorization failed even after the jitter ladder was exhausted.
    NotPositiveDefinite { dim: usize, max_jitter: f64 },
    /// A configuration value is inconsistent with the model or data.
    Config(String),
    /// A non-finite log-posterior persisted in the sampler.
    NonFinite(String),
    /// An operation needs more draws than were supplied.
    InsufficientDraws { needed: usize, found: usize },
    /// Requested overlap cannot be realized with the given covariate count.
    UnrealizableOverlap { overlap: f64, covariates: usize },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::DimensionMismatch {
                what,
                expected,
                found,
            } => write!(f, "dimension mismatch for {what}: expected {expected}, found {found}"),
            Error::NotPositiveDefinite { dim, max_jitter } => write!(
                f,
                "{dim}x{dim} matrix is not positive definite (jitter up to {max_jitter:e})"
            ),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::NonFinite(msg) => write!(f, "non-finite log-posterior: {msg}"),
            Error::InsufficientDraws { needed, found } => {
                write!(f, "need at least {needed} draws, found {found}")
            }
            Error::UnrealizableOverlap {
                overlap,
                covariates,
            } => write!(
                f,
                "overlap {overlap} cannot be realized with {covariates} covariates"
            ),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}

pub(crate) fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            what,
            expected,
            found,
        })
    }
}
