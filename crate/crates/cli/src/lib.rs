//! Experiment runner: config files, training subcommands, metrics logs,
//! checkpoints and the method comparison report.

pub mod checkpoint;
pub mod compare;
pub mod config;
pub mod error;
pub mod log;
pub mod reference;
pub mod run;

pub use error::{CliError, CliResult};
