//! Simulation designs, metrics and experiment orchestration.

pub mod config;
pub mod error;
pub mod experiment;
pub mod generate;
pub mod io;
pub mod metrics;
pub mod presets;
pub mod verify;

pub use config::{Design, ExperimentSpec, Method, NoiseBlock};
pub use error::{Result, SimError};
pub use experiment::{run_experiment, run_experiment_with, ExperimentReport};
pub use verify::{verify, Target, VerifyOptions, VerifyOutcome};
