//! File formats, run configuration and the command-line front end for
//! `zedit-core`.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod etk1;
pub mod prior_file;

pub use config::RunConfig;
pub use error::CliError;
