//! Scenario harness: synthetic data, configuration, execution and reports.

mod config;
mod dataset;
mod report;
mod scenario;

pub use config::{
    default_tau_grid, AiaSettings, AttackKind, DatasetConfig, DraSettings, ModelConfig, ScenarioConfig,
    SensitivitySettings, Sweep, SweepPoint, ThresholdMode, TrainingConfig,
};
pub use dataset::{load_dataset, save_dataset, synth_dataset, SyntheticDataset, MAGIC, NUM_CLASSES};
pub use report::{
    emit_report, fmt_value, layer_label, read_report, round_sig, LeakageReport, Metric, ReportFormat, ReportRow,
    Status, CSV_HEADER,
};
pub use scenario::{run_on_dataset, run_scenario, run_scenario_with, RunOptions};
