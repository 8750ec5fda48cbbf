//! Library side of the `ppac` command: configuration, the pipeline stages and
//! their on-disk artifacts.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::CliError;
