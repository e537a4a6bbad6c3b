//! End-to-end study: configuration, per-seed pipeline, output tree and
//! cross-seed reports.

pub mod config;
pub mod pipeline;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Method};
pub use report::emit_report;
pub use run::{run_experiment, run_seed, tree_hash, RunManifest};
