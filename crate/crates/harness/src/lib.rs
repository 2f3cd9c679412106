//! Experiment harness for guided generation on the synthetic benchmarks.
//!
//! A run is described by an [`ExperimentConfig`], executed by
//! [`run_experiment`] or [`sweep`], reduced by [`one_region_out_select`] and
//! written out by [`emit_reports`].

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiment;
pub mod report;
pub mod select;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Method};
pub use experiment::{run_experiment, sweep, RunRecord, SweepGrid};
pub use report::emit_reports;
pub use select::one_region_out_select;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] cvsg::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse: {0}")]
    Parse(String),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::Config(_) => "config",
            HarnessError::Core(cvsg::Error::Contract(_)) => "contract",
            HarnessError::Core(cvsg::Error::Eigen { .. }) => "eigen",
            HarnessError::Core(cvsg::Error::Schedule { .. }) => "schedule",
            HarnessError::Io { .. } => "io",
            HarnessError::Parse(_) => "parse",
        }
    }
}
