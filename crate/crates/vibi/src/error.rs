//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

/// Errors surfaced by the library. The CLI maps these onto process exit
/// codes: usage/config problems -> 1, data/format problems -> 2, numeric
/// failures -> 3.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI contract (0 success, 1 usage, 2 data,
    /// 3 numeric failure).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Data(_) | Error::Io(_) | Error::Lookup(_) => 2,
            Error::Numeric(_) => 3,
        }
    }

    /// Machine-parsable error category for one-line CLI diagnostics.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => "usage",
            Error::Data(_) | Error::Io(_) | Error::Lookup(_) => "data",
            Error::Numeric(_) => "numeric",
        }
    }
}

/// Shorthand for `Error::InvalidArgument` with formatting.
#[macro_export]
macro_rules! invalid_arg {
    ($($t:tt)*) => { $crate::error::Error::InvalidArgument(format!($($t)*)) };
}
