//! File formats, configuration and commands behind the `tweedie-dglm`
//! binary.

use std::fmt;

pub mod commands;
pub mod config;
pub mod data;
pub mod output;
pub mod posterior;

/// A problem with user input: a file, a column, a flag or a config value.
/// Reported with kind `input`; everything else is kind `runtime`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

/// `input` if the chain of `err` contains an [`InputError`] or a core
/// domain/config error, `runtime` otherwise.
pub fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if cause.is::<InputError>() || cause.is::<csv::Error>() {
            return "input";
        }
        if let Some(e) = cause.downcast_ref::<tweedie_dglm::Error>() {
            return match e {
                tweedie_dglm::Error::Domain(_)
                | tweedie_dglm::Error::Config(_)
                | tweedie_dglm::Error::DimensionMismatch { .. }
                | tweedie_dglm::Error::UnrealizableOverlap { .. } => "input",
                _ => "runtime",
            };
        }
    }
    "runtime"
}
