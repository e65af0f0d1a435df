//! Configuration, artifacts and exit codes behind the `tsmnet` binary.

pub mod commands;
pub mod config;
pub mod exit;

pub use config::{ResolvedConfig, RunConfig};
pub use exit::CliError;
