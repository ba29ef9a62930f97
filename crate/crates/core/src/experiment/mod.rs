//! Experiment configuration, runs, K sweeps, gradient checks and reports.

mod config;
mod gradcheck;
mod report;
mod run;
mod sweep;

pub use config::{parse_config, ExperimentConfig, Mode, Precision, DATASETS};
pub use gradcheck::{
    gradcheck_spec, layer_cases, model_cases, run_gradcheck, GradCheckCase, GradCheckSuite,
};
pub use report::render_report;
pub use run::{
    load_datasets, read_metrics, run_experiment, run_experiment_with, MetricsRow, RunSummary,
    CONFIG_ECHO_FILE, INCOMPLETE_FILE, METRICS_FILE, SUMMARY_FILE,
};
pub use sweep::{curve_csv, read_curve, sweep_k, CurvePoint, SweepResult, CURVE_FILE};
