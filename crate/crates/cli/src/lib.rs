//! Command-line workflows around `ynet-core`: configuration layering, run
//! manifests, training with resumable state, evaluation exports,
//! prediction, gradient checking and model inspection.

pub mod cli;
pub mod commands;
pub mod config;
pub mod decode;
pub mod error;

pub use cli::{run, Cli};
pub use error::CliError;
