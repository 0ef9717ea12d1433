//! Command-line driver: one JSON run config, four subcommands.
//!
//! `train` writes a checkpoint, a metrics log, wall-clock timings and the
//! resolved config. `eval`, `generate` and `embed` read a checkpoint and,
//! unless given another config, rebuild the data of the run stored in it.
//! Randomness flows from the run seed through named streams, so probes and
//! evaluation never shift training draws.

mod commands;
pub mod config;

pub use commands::{
    cmd_embed, cmd_eval, cmd_generate, cmd_train, load_run, resolve, EvalReport, GenerateOptions,
    LoadedRun, PreparedData, SplitName, TrainOutputs, CHECKPOINT_FILE, METRICS_FILE, REPORT_FILE,
    RESOLVED_CONFIG_FILE, TIMING_FILE,
};
pub use config::{DatasetConfig, EvaluationConfig, IdxDataset, ModeConfig, Probe, RunConfig};
