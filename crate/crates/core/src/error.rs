use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants are coarse on purpose: the CLI maps each one onto a distinct
/// exit code (see `docs/cli.md`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A matrix function was applied outside its domain.
    #[error("domain error: {op} requires a positive definite argument, smallest eigenvalue is {min_eigenvalue:e}")]
    Domain { op: &'static str, min_eigenvalue: f64 },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("invalid batch: {0}")]
    InvalidBatch(String),

    #[error("model state error: {0}")]
    ModelState(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error in {}: field `{field}`: {message}", file.display())]
    Format { file: PathBuf, field: String, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(file: impl Into<PathBuf>, field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format { file: file.into(), field: field.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
