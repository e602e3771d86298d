//! Batch front end for the `mixssl` estimators: configuration parsing,
//! subcommand dispatch and CSV output.

pub mod config;
pub mod output;
pub mod run;

pub use config::{ConfigError, RawConfig};
pub use run::{execute, Command, RunManifest};
