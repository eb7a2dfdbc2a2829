//! Config loading and the command implementations behind the CLI.

mod commands;
mod config;

pub use commands::{
    ablate, evaluate, infer, synth_data, tap_sweep, train, AblationRow, EvalSource, SweepRow, ABLATION_CSV,
    ABLATION_HEADER, ESTIMATES_DIR, METRICS_CSV, NO_PROCESSING_JSON, SUMMARY_JSON, TAP_SWEEP_CSV, TAP_SWEEP_HEADER,
};
pub use config::{apply_override, load_config, DataConfig, RunConfig, SweepConfig, RESOLVED_CONFIG};
