//! Command-line driver: world generation, vanilla training, unlearning,
//! offline null-space initialization, continual runs and weight sweeps.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use commands::{run, Cli};
pub use error::{CliError, Result};
