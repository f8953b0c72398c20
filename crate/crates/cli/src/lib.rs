//! Experiment configuration, run manifest and stage orchestration for the
//! `aelayers` command.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod seeds;

pub use config::{ExperimentConfig, Preset};
pub use error::{CliError, Result};
pub use pipeline::{Outcome, Pipeline, Stage};
