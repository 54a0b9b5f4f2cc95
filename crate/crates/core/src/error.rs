use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {context}: {value}")]
    Domain { context: &'static str, value: f64 },

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("time {t} outside the admissible range for {context}")]
    InvalidTime { context: &'static str, t: f64 },

    #[error("non-finite activation at layer {layer} of {network}")]
    NumericLayer { network: &'static str, layer: usize },

    #[error("non-finite {what} at iteration {iteration}")]
    NonFiniteLoss { what: &'static str, iteration: u64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("sinkhorn did not converge after {iterations} iterations (violation {violation:e})")]
    NotConverged { iterations: usize, violation: f64 },

    #[error("instance too large for brute force: {free} free parameters (max {max})")]
    TooLarge { free: usize, max: usize },

    #[error("matrix is not positive definite ({context})")]
    NotPositiveDefinite { context: &'static str },

    #[error("degenerate reference statistic: {0}")]
    Degenerate(&'static str),

    #[error("malformed checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure_finite(context: &'static str, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Domain { context, value })
    }
}
