//! Experiment plumbing: partition variance, configured training runs and
//! streaming evaluation.

pub mod config;
pub mod experiment;
pub mod variance;

pub use config::{EvalConfig, ExperimentConfig, TaskSpec, TrainingConfig};
pub use experiment::{
    evaluate, held_out_tasks, metrics_csv, run_experiment, scenario_table, train_regime, ExperimentSummary, MetricsRow,
    RegimeSummary, ScenarioRow, TrainOutcome, CSV_HEADER,
};
pub use variance::{chunk_mean, encoding_variance, random_chunks, VarianceReport, VarianceRow};
