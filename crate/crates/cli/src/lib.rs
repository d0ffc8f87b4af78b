//! Command implementations behind the `dpsynth` binary.
//!
//! Exit codes: 0 success, 1 configuration, 2 provider or transport, 3 budget
//! or privacy-policy violation.

pub mod commands;
pub mod config;
mod error;

pub use commands::{cmd_attack, cmd_audit, cmd_evaluate, cmd_generate, Manifest};
pub use config::{LoadedConfig, RunConfig, RunOptions};
pub use error::CliError;
