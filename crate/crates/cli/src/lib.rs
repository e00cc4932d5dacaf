//! The `forge` command: configuration and subcommands.

pub mod cli;
pub mod commands;
pub mod config;
