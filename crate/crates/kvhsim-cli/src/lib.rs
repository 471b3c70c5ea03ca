//! Command-line front end: config parsing, state construction, binary
//! snapshots, diagnostics CSV, and the subcommand implementations.

pub mod build;
pub mod commands;
pub mod config;
pub mod csvout;
pub mod snapshot;
pub mod suites;
