//! Command-line driver: configuration, pipeline orchestration and the
//! synthetic benchmark.

pub mod bench;
pub mod codec;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use config::EditConfig;
pub use error::{CliError, CliResult};
