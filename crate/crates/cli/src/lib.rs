//! Command-line front end: fit, predict, report and simulate.

pub mod commands;
pub mod config;
pub mod error;
pub mod model_file;

pub use error::{CliError, ExitKind};
