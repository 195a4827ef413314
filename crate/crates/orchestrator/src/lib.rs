//! Runs the labeling pipeline stage by stage over a run directory, with
//! human gates for pool labeling, prompt approval and open mismatches.

pub mod api;
pub mod config;
pub mod runner;
pub mod state;
pub mod sweep;
pub mod synthetic;

pub use config::{ConfigError, RunConfig};
pub use runner::{Orchestrator, RunError, RunReport};
pub use state::{RunState, Stage};
