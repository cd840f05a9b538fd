//! `lesionseg`: prepare splits, train, run the experiment grid, evaluate,
//! report, preview augmentations and predict masks.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors, 3 for
//! runtime failures. Diagnostics go to stderr; stdout lists produced paths.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use lesionseg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "lesionseg", version, about = "Skin lesion segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a dataset and write a train/val(/test) split manifest.
    Prepare(PrepareArgs),
    /// Train one (model, augmentation, seed) run.
    Train(TrainArgs),
    /// Train every (model, augmentation, seed) combination, skipping finished runs.
    Grid(GridArgs),
    /// Score a run's best checkpoint on the validation or test split.
    Evaluate(EvaluateArgs),
    /// Build tables, figures and report.md from a runs directory.
    Report(ReportArgs),
    /// Write before/after panels of an augmentation configuration.
    PreviewAug(PreviewArgs),
    /// Predict binary masks for images with a trained checkpoint.
    Predict(PredictArgs),
    /// Write the model registry with measured parameter counts.
    Registry(RegistryArgs),
}

#[derive(Args, Debug)]
struct PrepareArgs {
    #[arg(long)]
    data_root: PathBuf,
    /// Manifest file to write.
    #[arg(long, default_value = "split.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional held-out test set root.
    #[arg(long)]
    test_root: Option<PathBuf>,
}

/// Training settings shared by `train` and `grid`; flags override the config file.
#[derive(Args, Debug, Clone)]
struct TrainOpts {
    /// TOML file overriding any training setting.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Split manifest written by `prepare`.
    #[arg(long, default_value = "split.json")]
    split: PathBuf,
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    max_train: Option<usize>,
    #[arg(long)]
    max_val: Option<usize>,
    /// Wall-clock limit per run, in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "AUG-1")]
    aug: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[command(flatten)]
    opts: TrainOpts,
    /// Fit the first 8 training images without augmentation until train dice
    /// reaches 0.95 or 200 steps pass.
    #[arg(long)]
    overfit_batch: bool,
}

#[derive(Args, Debug)]
struct GridArgs {
    /// Comma-separated model labels, or `all`.
    #[arg(long, default_value = "all")]
    models: String,
    /// Comma-separated augmentation labels, or `all`.
    #[arg(long, default_value = "all")]
    augs: String,
    #[arg(long, default_value = "1,2,3,4,5")]
    seeds: String,
    #[command(flatten)]
    opts: TrainOpts,
    /// Runs trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    model: String,
    #[arg(long, default_value = "AUG-1")]
    aug: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long, default_value = "split.json")]
    split: PathBuf,
    /// `val` or `test`.
    #[arg(long, default_value = "val")]
    on: String,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long, default_value = "runs")]
    runs: PathBuf,
    #[arg(long, default_value = "report")]
    out: PathBuf,
    /// Comma-separated table kinds, or `all`.
    #[arg(long, default_value = "all")]
    tables: String,
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    figures: bool,
    /// Rows of the overall table (comma-separated labels); all models when absent.
    #[arg(long)]
    overall_models: Option<String>,
    /// Fail when the grid has missing cells.
    #[arg(long)]
    strict: bool,
    /// Test-image overlay grid from each model's checkpoint for this augmentation and seed.
    #[arg(long)]
    overlays: bool,
    #[arg(long, default_value = "split.json")]
    split: PathBuf,
    #[arg(long, default_value_t = 4)]
    overlay_samples: usize,
    #[arg(long, default_value = "AUG-1")]
    overlay_aug: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct PreviewArgs {
    #[arg(long)]
    aug: String,
    /// Number of samples to preview.
    #[arg(long, default_value_t = 4)]
    samples: usize,
    /// Split manifest to draw samples from; synthetic samples when absent.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    image_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "preview")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    model: String,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, required = true, num_args = 1..)]
    images: Vec<PathBuf>,
    #[arg(long, default_value = "predictions")]
    out: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    #[arg(long, default_value_t = 256)]
    image_size: usize,
}

#[derive(Args, Debug)]
struct RegistryArgs {
    #[arg(long, default_value = "registry.json")]
    out: PathBuf,
}

/// Rejected input detected by the command layer itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<Error>() {
        Some(
            Error::EmptyDataset(_)
            | Error::MissingMask(_)
            | Error::InvalidFraction(_)
            | Error::InvalidConfig(_)
            | Error::UnknownLabel(_)
            | Error::IncompatibleShape(_)
            | Error::BadReduction { .. }
            | Error::BadKernel(_)
            | Error::BadBeta(_)
            | Error::BadGamma(_)
            | Error::IncompleteGrid(_)
            | Error::NoData
            | Error::TomlDe(_),
        ) => 2,
        _ => 3,
    }
}

fn report_error(err: &anyhow::Error) {
    eprintln!("error: {err:#}");
    if let Some(Error::MissingMask(files)) = err.downcast_ref::<Error>() {
        for f in files {
            eprintln!("  missing mask for {}", f.display());
        }
    }
    if let Some(Error::IncompleteGrid(cells)) = err.downcast_ref::<Error>() {
        eprintln!("  missing cells: {}", cells.join(", "));
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = commands::check_device().and_then(|()| match cli.command {
        Command::Prepare(a) => commands::prepare(a),
        Command::Train(a) => commands::train(a),
        Command::Grid(a) => commands::grid(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Report(a) => commands::report(a),
        Command::PreviewAug(a) => commands::preview_aug(a),
        Command::Predict(a) => commands::predict(a),
        Command::Registry(a) => commands::registry(a),
    });
    match result {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            report_error(&e);
            ExitCode::from(exit_code(&e))
        }
    }
}
