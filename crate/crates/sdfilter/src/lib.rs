//! File formats, configuration, Monte Carlo harness and command
//! implementations for the `sdfilter` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;

pub use error::{CliError, CliResult};
