//! Training protocol for single runs and the repeated experiment grid.

mod config;
mod experiment;
mod run;
mod schedule;

pub use config::{LossKind, TrainConfig};
pub use experiment::{
    collect_results, load_experiment, run_experiment, run_grid, ExperimentResult, SpeedStats,
    DEFAULT_SEEDS, OVERFIT_AFTER_EPOCH,
};
pub use run::{
    evaluate, execute_run, init_seed, overfit_batch, train_one, write_atomic, OverfitConfig,
    OverfitReport, RunConfigSnapshot, RunDir, RunManifest, RunOutcome, RunStatus, TrainData,
    CONFIG_FILE, MANIFEST_FILE, METRICS_FILE,
};
pub use schedule::{EpochDecision, Schedule, Sgd};
