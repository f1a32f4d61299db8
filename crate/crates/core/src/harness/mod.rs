//! Config files, run orchestration and on-disk artifacts behind the
//! command-line tool.

mod commands;
mod config;
mod io;
mod prepare;
mod summary;

pub use commands::{
    cmd_fit, cmd_report, cmd_run, cmd_sweep, expand_grid, load_sweep, run_config, run_sweep, CellFailure, FitKind, RunArtifacts,
    RunOptions, SweepArtifacts, SweepCell, SweepGrid, SweepSpec, FAILURES_FILE, MANIFEST_FILE, MODEL_FILE, ROUNDS_FILE, SUMMARY_FILE,
};
pub use config::{
    load_config, parse_json, ConstraintSource, ConstraintsConfig, DataConfig, ExperimentConfig, Manifest, PartitionConfig,
    PrivacyConfig, ResolvedSeeds, TrainingConfig, SCHEMA_VERSION,
};
pub use io::{read_model_bin, write_atomic, write_model_bin, MODEL_MAGIC, MODEL_VERSION};
pub use prepare::{fit_reference, prepare, PreparedRun, REFERENCE_STEPS};
pub use summary::{read_summary_csv, write_summary_csv, RunResult, SummaryRow, SUMMARY_COLUMNS};
