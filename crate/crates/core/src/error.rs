//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error.
///
/// `Domain` marks mathematically invalid inputs (non-positive bandwidth,
/// score outside `[0,1]`, threshold outside the model support). `Usage`
/// marks contract violations (empty inputs, unsorted grids, missing data).
/// `Runtime` marks failures of an otherwise valid run (trace exhausted,
/// no sign change in a root bracket).
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn runtime(msg: impl Into<String>) -> Self {
        Error::Runtime(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
