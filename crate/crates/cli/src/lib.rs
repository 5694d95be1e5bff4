//! Command-line surface for casemil: configuration parsing and the
//! generate / preprocess / train / eval / gradcheck commands.

pub mod commands;
pub mod config;

pub use commands::CliError;
pub use config::{ConfigError, DataSource, RunConfig};
