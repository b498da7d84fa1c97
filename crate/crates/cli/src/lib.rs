//! The `mafr` command line: synthesis, training, inference, evaluation, ablations and
//! gradient checks driven by one JSON run config.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::run;
pub use config::RunConfig;
pub use error::CliError;
