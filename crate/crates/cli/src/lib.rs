//! Command-line pipeline: simulate traces, perturb images, run analyses and
//! emit CSV reports with a run manifest.

pub mod analyze;
pub mod cli;
pub mod config;
pub mod error;
pub mod manifest;
pub mod plots;
pub mod simulate;
pub mod tables;

pub use config::RunConfig;
pub use error::{PipelineError, Result};
