//! Front-end for `llgrid`: flat configs, subcommands and report writers.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;
pub mod suites;
