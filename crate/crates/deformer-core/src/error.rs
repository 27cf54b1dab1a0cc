//! Crate-wide error type.

use thiserror::Error;

/// Errors produced across the crate. Variants mirror the failure classes of
/// the public operations: shape mismatches, invalid parameters or inputs,
/// numerical blow-ups, and the file-format/compatibility failures of the
/// checkpoint and cache stores.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("parameter error: {0}")]
    Param(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("state error: {0}")]
    State(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("cache compatibility error: {0}")]
    CacheCompat(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
