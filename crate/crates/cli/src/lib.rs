//! Pipeline commands behind the `ptransfer` binary: pre-train a backbone,
//! search per-layer learning-rate schemes, evaluate schemes on novel
//! episodes, and tabulate results.

pub mod commands;
pub mod config;
pub mod error;
pub mod grid;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
