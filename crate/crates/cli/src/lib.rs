//! Command-line front end: configuration loading, file formats and the subcommands behind the
//! `fscl` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use config::ExperimentConfig;
pub use error::{CliError, Result};
