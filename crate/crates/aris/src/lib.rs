//! File formats, configuration, the PLC emulator server and the command
//! implementations behind the `aris` binary. The pipeline itself lives in
//! `aris-core`.

pub mod commands;
pub mod config;
pub mod evaluate;
pub mod ops;
pub mod server;

pub use config::{Preset, RunConfig};

/// Overrides the log/output directory of every subcommand.
pub const LOG_DIR_ENV: &str = "ARIS_LOG_DIR";
