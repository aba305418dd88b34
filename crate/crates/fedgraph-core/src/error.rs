//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide error type.
///
/// `Config` covers anything the user can fix (bad config values, shape
/// mismatches at the API boundary, infeasible partitions). `Numeric` is a
/// runtime failure of the math (non-finite loss). `Internal` marks states
/// that should be impossible within one run.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Exit code for CLI surfacing: config/format problems are 2, the rest 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Format(_) => 2,
            _ => 1,
        }
    }
}
