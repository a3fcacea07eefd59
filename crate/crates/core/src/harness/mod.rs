//! Experiment protocol: data, task streams, training, evaluation,
//! ablations and reports.

pub mod ablation;
pub mod config;
pub mod data;
pub mod metrics;
pub mod report;
pub mod stream;
pub mod train;

pub use config::{Method, RunConfig};
pub use metrics::{average_incremental_accuracy, MetricsLog, MetricsRow};
pub use stream::{build_task_stream, TaskStream};
pub use train::{evaluate, run_experiment, Learner, RunOptions, RunResult};
