//! Process exit codes.

use std::fmt;
use std::path::Path;

use tsmnet::Error;

pub const OK: i32 = 0;
/// Any failure without a more specific code.
pub const OTHER: i32 = 1;
/// Invalid configuration or command line.
pub const CONFIG: i32 = 2;
/// Missing or unwritable files, or a locked output directory.
pub const IO: i32 = 3;
/// Malformed or version-mismatched input files.
pub const FORMAT: i32 = 4;
/// Non-finite or out-of-domain numerics.
pub const NUMERIC: i32 = 5;
/// At least one finite-difference check exceeded its tolerance.
pub const GRADCHECK: i32 = 6;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn other(message: impl Into<String>) -> Self {
        Self::new(OTHER, message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(CONFIG, format!("config error: {}", message.into()))
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self::new(NUMERIC, format!("numeric error: {}", message.into()))
    }

    pub fn gradcheck(message: impl Into<String>) -> Self {
        Self::new(GRADCHECK, message)
    }

    pub fn locked(lock: &Path) -> Self {
        Self::new(IO, format!("output directory is locked by another run ({} exists)", lock.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

pub fn code_of(e: &Error) -> i32 {
    match e {
        Error::Config(_) => CONFIG,
        Error::Io { .. } => IO,
        Error::Format { .. } => FORMAT,
        Error::Numeric(_) | Error::Domain { .. } => NUMERIC,
        Error::InvalidInput(_) | Error::InvalidBatch(_) | Error::ModelState(_) => OTHER,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        Self::new(code_of(&e), e.to_string())
    }
}
