//! Command-line front end for `deep-rnmt-core`: configuration files,
//! checkpoints on disk, training runs, translation and evaluation reports.

pub mod commands;
pub mod files;
pub mod run_config;

pub use run_config::{ConfigError, RunConfig};
