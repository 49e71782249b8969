//! Configuration, persistence and the pipeline commands.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod io;

pub use commands::*;
pub use experiment::{Experiment, ExperimentConfig, OfflineSection};
pub use io::{read_trajectories, trajectories_to_string, write_trajectories, TrajectoryHeader};
