//! Orchestration for the `scriptgen` command: run configuration, pipeline
//! stages over a run directory, and evaluation reports.

pub mod config;
pub mod report;
pub mod stages;

pub use config::{Method, RunConfig};
pub use report::EvaluationReport;
pub use stages::{run_pipeline, Workspace};
