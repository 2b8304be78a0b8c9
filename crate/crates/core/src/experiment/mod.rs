//! Config-driven experiment runner: seeded federated runs, grid sweeps,
//! checkpoints with exact resume, metrics and heatmap export.

mod checkpoint;
mod config;
mod report;
mod runner;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{
    rank_preset, rescaler_label, tier_level, ExperimentConfig, ExperimentSection, FederationSection, Method,
    ModelSection, Provenance, Sweep, TrainingSection, BUDGET_TIERS, RANK_FRACTIONS,
};
pub use report::{export_heatmap, merge_reports, ReportColumn, ReportTable};
pub use runner::{
    checkpoint_path, derive_seed, heatmap_path, read_metrics, read_round_reports, run_experiment, run_single,
    MetricsRow, RunArtifacts, RunOptions, RunOutput, RunSetup, CHECKPOINT_DIR, HEATMAP_DIR, METRICS_FILE,
    RESOLVED_CONFIG_FILE, ROUNDS_FILE,
};
