//! Scenario files, result files and the experiment driver behind the `distopt` binary.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod output;

pub use commands::{execute, CliError, Command, Completed, RunArgs};
pub use config::{load_config, ConfigError, Overrides, ScenarioConfig};
