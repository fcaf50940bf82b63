//! Library-wide error type and process exit-code mapping.

use thiserror::Error;

/// Errors surfaced by the library and mapped onto CLI exit codes.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, shape mismatch, or contract violation.
    #[error("config error: {0}")]
    Config(String),

    /// Numeric failure at runtime (divergence, singular matrix, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Filesystem or serialization failure.
    #[error("i/o error: {0}")]
    Io(String),
}

impl Error {
    /// Shorthand constructor for configuration and validation errors.
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Shorthand constructor for numeric errors.
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Shorthand constructor for i/o errors.
    pub fn io(msg: impl Into<String>) -> Self {
        Error::Io(msg.into())
    }

    /// Process exit code for this error class: 2 config, 3 numeric, 4 i/o.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Numeric(_) => 3,
            Error::Io(_) => 4,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;
