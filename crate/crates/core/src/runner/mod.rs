//! Experiment plumbing: config, the training loop, telemetry, checkpoints,
//! audits and sequential sweeps.

mod checkpoint;
mod config;
mod run;
mod sweep;
mod telemetry;
mod trainer;

pub use checkpoint::{peek_precision, Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use config::{apply_override, ExperimentConfig, OutputConfig, TrainConfig, ViewConfig};
pub use run::{
    audit_checkpoint, run_training, AuditData, Manifest, RunSummary, AUDIT_FILE, CHECKPOINT_FILE,
    EMBEDDINGS_FILE, MANIFEST_FILE, TELEMETRY_FILE,
};
pub use sweep::{configure, expand, parse_grid, run_sweep, Axis, SWEEP_SUMMARY_FILE};
pub use telemetry::{
    read_telemetry, write_telemetry, write_telemetry_file, TelemetryRow, TELEMETRY_COLUMNS,
    TELEMETRY_SCHEMA_VERSION,
};
pub use trainer::{Diagnostic, StepReport, Trainer};
