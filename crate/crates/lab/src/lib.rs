//! File formats, experiment pipelines and the command-line front end for
//! `sheaf-core`.
//!
//! Every pipeline reads one [`config::ExperimentConfig`] and writes under its
//! output root (overridable with `SHEAF_LAB_OUTPUT_ROOT`). Outputs carry the
//! config hash and seed and are byte-identical across reruns.

pub mod commands;
pub mod config;
pub mod error;
pub mod files;
pub mod reference;

pub use commands::{cmd_analyze, cmd_discover, cmd_theory, cmd_train};
pub use config::ExperimentConfig;
pub use error::LabError;
