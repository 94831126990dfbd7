//! Declarative experiment runner for the loop-soup laboratory.
//!
//! A run reads one TOML config, computes replicas in checkpointed chunks,
//! and writes a manifest, per-replica sufficient statistics and results.
//! Outputs depend only on the config and seed, never on thread count.

pub mod config;
pub mod error;
pub mod manifest;
pub mod merge;
pub mod run;
pub mod validate;

pub use config::{Experiment, RunConfig};
pub use error::{HarnessError, Result};
pub use manifest::RunManifest;
pub use merge::merge;
pub use run::{run, RunOptions};
