//! Experiment runner behind the `mpsl` binary.

pub mod config;
pub mod run;

pub use config::{ExperimentConfig, RunSpec, SweepAxis, TransportKind};
pub use run::{exit_code, Launcher, SeedRun};
