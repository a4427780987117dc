//! Command-line harness around `bai-core`: configuration files, run
//! manifests, checkpoints, metric logs and the `bai` subcommands.
//!
//! Exit codes are a stable contract: `0` success, `1` runtime failure,
//! `2` usage or configuration error.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod metrics;

pub use error::{CliError, CliResult};
