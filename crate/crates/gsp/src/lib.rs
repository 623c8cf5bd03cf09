//! Experiment harness for sparse graph prompt tuning: config handling,
//! parallel seed runs, CSV/JSON outputs and SVG charts.

pub mod commands;
pub mod config;
pub mod error;
pub mod report;
pub mod runner;
pub mod svg;

pub use config::{Overrides, RunConfig};
pub use error::CliError;
