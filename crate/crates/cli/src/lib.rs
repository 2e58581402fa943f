//! Command-line front end of gflstab: run configuration, subcommands and
//! CSV/manifest output.

pub mod commands;
pub mod config;
pub mod output;
