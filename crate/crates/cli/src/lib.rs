//! Experiment harness for channel-exchanging networks: configuration, runs, grids and outputs.

pub mod config;
pub mod error;
pub mod harness;
pub mod output;

pub use config::{RandomFraction, RunConfig};
pub use error::{CliError, Result};
pub use harness::{grid, modality_scaling, preset, run, sweep, GridReport, RunReport, SweepParam, Variant};
