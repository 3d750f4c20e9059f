//! Experiment harness: configuration, repeated runs, aggregation, plots,
//! oracle suites and the `dope` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod plot;
pub mod results;
pub mod runner;
pub mod truth;
pub mod verify;

pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use results::ResultRow;
pub use runner::run_experiment;
