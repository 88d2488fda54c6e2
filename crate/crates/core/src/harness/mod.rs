//! Staged benchmark runs, their reports, and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod report;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{ExperimentConfig, ExtractorChoice};
pub use experiment::{dataset_for, run_ablation, run_experiment, run_on_dataset, run_with_models, RunOutput};
pub use report::{emit_report, DeviceCount, ExperimentReport, ReportFormat, StageMetrics, StrategyReport};
