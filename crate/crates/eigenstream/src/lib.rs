//! Experiment driver around `eigenstream-core`: configuration files, MNIST
//! loading from disk, checkpoints, CSV artifacts and the parallel sweep.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiments;
pub mod report;

pub use config::{Eta, Mode, RunConfig};
pub use error::{CliError, Result};
