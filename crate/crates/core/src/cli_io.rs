//! Configuration, file formats and the `ctg` subcommands.

pub mod commands;
pub mod config;
pub mod formats;

pub use commands::run_cli;
pub use config::{parse_config, PipelineConfig, ValueCenter};
