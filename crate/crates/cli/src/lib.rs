//! Config-driven experiment runner for the `dynkin` solvers.

pub mod config;
pub mod run;

pub use config::{ConfigError, RunConfig};
pub use run::{run, RunManifest, RunOutcome, RunRequest};
