//! Crate-wide error type with the exit-code classes used by the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration: unknown keys, invalid values, missing flags.
    #[error("config error: {0}")]
    Config(String),

    /// Bad input data: missing files, malformed scene/mesh/checkpoint files.
    #[error("data error: {0}")]
    Data(String),

    /// Numeric failure: NaN loss, divergence, degenerate geometry.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for this error class (config 2, data 3, numeric 4).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
