//! Experiment configuration, runners, the communication benchmark and the
//! self-test used by the CLI.

pub mod bench;
pub mod config;
pub mod metrics;
pub mod runner;
pub mod selftest;

pub use config::{ExperimentConfig, Scheme};
pub use metrics::{read_metrics, MetricsRow, MetricsWriter};
pub use runner::{output_dir, prepare_data, run_experiment, run_scheme, verify_replay, ExperimentData, RunSummary};
