use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::{LossKind, TrainConfig};
use super::schedule::{Schedule, Sgd};
use crate::augment::{build_pipeline, hair_remove, AugConfig, AugLabel, RngStream};
use crate::dataset::{load_all, Sample, Split, SplitManifest};
use crate::error::{Error, Result};
use crate::metrics::{
    dice_loss_tensor, focal_tversky_loss_tensor, BatchMetrics, MetricAccumulator, MetricRecord,
    RunHistory, FOCAL_GAMMA, TVERSKY_BETA,
};
use crate::models::{masks_to_tensor, samples_to_tensor, Model, ModelLabel, ModelSpec};
use crate::nn::Ctx;

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loaded training and validation samples.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl TrainData {
    /// Loads both splits of a manifest at `config.image_size`, honoring the
    /// sample limits.
    pub fn from_manifest(manifest: &SplitManifest, config: &TrainConfig) -> Result<Self> {
        let size = (config.image_size, config.image_size);
        let mut train = manifest.index(Split::Train);
        let mut val = manifest.index(Split::Val);
        if let Some(n) = config.max_train_samples {
            train.records.truncate(n);
        }
        if let Some(n) = config.max_val_samples {
            val.records.truncate(n);
        }
        Ok(Self {
            train: load_all(&train, size)?,
            val: load_all(&val, size)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.is_empty() || self.val.is_empty() {
            return Err(Error::NoData);
        }
        let shape = self.train[0].shape();
        for s in self.train.iter().chain(&self.val) {
            s.validate()?;
            if s.shape() != shape {
                return Err(Error::ShapeMismatch(format!("{} is {:?}, expected {shape:?}", s.id, s.shape())));
            }
        }
        Ok(())
    }
}

/// Seed used for weight initialization of a run.
pub fn init_seed(seed: u64) -> u64 {
    crate::augment::stable_hash(seed, &["init"])
}

fn batch_loss(kind: LossKind, y: &Tensor, p: &Tensor) -> Result<Tensor> {
    match kind {
        LossKind::Dice => dice_loss_tensor(y, p),
        LossKind::FocalTversky => focal_tversky_loss_tensor(y, p, TVERSKY_BETA, FOCAL_GAMMA),
    }
}

/// Per-sample means of dice, IoU and focal Tversky loss in evaluation mode.
pub fn evaluate(model: &Model, samples: &[Sample], batch: usize) -> Result<BatchMetrics> {
    let mut acc = MetricAccumulator::default();
    for chunk in samples.chunks(batch.max(1)) {
        let probs = model.predict_probs(chunk, batch)?;
        for (s, p) in chunk.iter().zip(&probs) {
            let p = p.as_slice().expect("standard layout");
            acc.push(BatchMetrics::of_sample(&s.mask_f32(), p)?);
        }
    }
    acc.mean().ok_or(Error::NoData)
}

/// Everything a finished `train_one` call produced.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub history: RunHistory,
    /// Learning rate used in each epoch.
    pub lr_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub parameters: usize,
    pub elapsed_secs: f64,
}

/// Where a run writes its per-epoch CSV and best checkpoint.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
    pub model: ModelLabel,
    pub aug: AugLabel,
    pub seed: u64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";

impl RunDir {
    /// `runs_root/{model}/{aug}/{seed}`.
    pub fn new(runs_root: &Path, model: ModelLabel, aug: AugLabel, seed: u64) -> Self {
        Self {
            root: runs_root.join(model.name()).join(aug.name()).join(seed.to_string()),
            model,
            aug,
            seed,
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn metrics_csv(&self) -> PathBuf {
        self.root.join(METRICS_FILE)
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn config(&self) -> PathBuf {
        self.root.join(CONFIG_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root
            .join(format!("{}_{}_{}.ckpt", self.model.name(), self.aug.name(), self.seed))
    }

    pub fn read_manifest(&self) -> Result<RunManifest> {
        Ok(serde_json::from_str(&std::fs::read_to_string(self.manifest())?)?)
    }

    pub fn read_snapshot(&self) -> Result<RunConfigSnapshot> {
        Ok(toml::from_str(&std::fs::read_to_string(self.config())?)?)
    }

    /// A run is complete once its manifest exists and parses.
    pub fn is_complete(&self) -> bool {
        self.read_manifest().is_ok()
    }

    pub fn read_history(&self) -> Result<RunHistory> {
        let manifest = self.read_manifest()?;
        let mut h = RunHistory::new(self.model, self.aug, self.seed);
        h.records = RunHistory::read_records(&self.metrics_csv())?;
        h.stop_epoch = manifest.stop_epoch;
        Ok(h)
    }

    fn write_history(&self, h: &RunHistory) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &h.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        write_atomic(&self.metrics_csv(), &bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
    OutOfBudget,
}

/// Completion record written last; its presence marks the run as done.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub model: ModelLabel,
    pub aug: AugLabel,
    pub seed: u64,
    pub status: RunStatus,
    pub stop_epoch: usize,
    pub best_epoch: usize,
    pub best_val_dice: Option<f64>,
    pub lr_history: Vec<f64>,
    pub parameters: usize,
    pub elapsed_secs: f64,
    pub error: Option<String>,
}

/// Snapshot of every setting a run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfigSnapshot {
    pub seed: u64,
    pub train: TrainConfig,
    pub model: ModelSpec,
    pub aug: AugConfig,
}

struct Progress {
    lr_history: Vec<f64>,
    best_epoch: usize,
    best_val_dice: f64,
    parameters: usize,
}

/// Trains one (model, augmentation, seed) combination.
///
/// Validation data is never augmented. Training metrics are measured in
/// evaluation mode on the unaugmented training split at the end of each epoch.
pub fn train_one(
    spec: &ModelSpec,
    aug: &AugConfig,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
    run_dir: Option<&RunDir>,
) -> Result<RunOutcome> {
    let mut history = RunHistory::new(spec.label, aug.label, seed);
    let mut progress = Progress {
        lr_history: Vec::new(),
        best_epoch: 0,
        best_val_dice: f64::NEG_INFINITY,
        parameters: 0,
    };
    let start = Instant::now();
    let result = train_loop(spec, aug, data, config, seed, run_dir, &mut history, &mut progress, start);
    result.map(|()| RunOutcome {
        history,
        lr_history: progress.lr_history,
        best_epoch: progress.best_epoch,
        best_val_dice: progress.best_val_dice,
        parameters: progress.parameters,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[allow(clippy::too_many_arguments)]
fn train_loop(
    spec: &ModelSpec,
    aug: &AugConfig,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
    run_dir: Option<&RunDir>,
    history: &mut RunHistory,
    progress: &mut Progress,
    start: Instant,
) -> Result<()> {
    config.validate()?;
    data.validate()?;
    let (h, w) = data.train[0].shape();
    let spec = spec.clone().with_input(h, w);
    let model = Model::new(&spec, init_seed(seed))?;
    progress.parameters = model.count_parameters();

    // Deterministic hair removal always fires, so do it once up front.
    let mut aug = aug.clone();
    let pre_removed: Option<Vec<Sample>> = if aug.hair_removal && aug.per_op_probs.hair_removal >= 1.0 {
        aug.hair_removal = false;
        Some(data.train.iter().map(|s| hair_remove(s, &aug.removal)).collect())
    } else {
        None
    };
    let train_src = pre_removed.as_deref().unwrap_or(&data.train);
    let pipeline = build_pipeline(&aug)?;

    let rng = RngStream::new(seed);
    let mut schedule = Schedule::new(config);
    let mut opt = Sgd::new(model.store().trainable_vars(), config.initial_lr, config.momentum);
    let dtype = model.dtype();

    for epoch in 1..=config.max_epochs {
        opt.set_lr(schedule.lr());
        progress.lr_history.push(schedule.lr());
        let epoch_key = epoch.to_string();
        let mut order: Vec<usize> = (0..train_src.len()).collect();
        order.shuffle(&mut rng.substream(&["shuffle", &epoch_key]));
        let mut aug_rng = rng.substream(&["augment", &epoch_key]);

        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| train_src[i].clone()).collect();
            let batch = pipeline.apply(&batch, &mut aug_rng)?;
            let x = samples_to_tensor(&batch, dtype)?;
            let y = masks_to_tensor(&batch, dtype)?;
            let p = model.forward(&x, Ctx::TRAIN)?;
            let loss = batch_loss(config.loss, &y, &p)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                history.stop_epoch = epoch;
                return Err(Error::DivergenceDetected { epoch, step: step + 1 });
            }
            opt.backward_step(&loss)?;
        }

        let train_m = evaluate(&model, &data.train, config.eval_batch_size)?;
        let val_m = evaluate(&model, &data.val, config.eval_batch_size)?;
        let record = MetricRecord::from_pair(epoch, train_m, val_m);
        log::info!(
            "{} {} seed {seed} epoch {epoch}: dice {:.4} val_dice {:.4} lr {:.0e}",
            spec.label,
            aug.label,
            record.dice,
            record.val_dice,
            schedule.lr()
        );
        history.records.push(record);
        history.stop_epoch = epoch;

        if record.val_dice > progress.best_val_dice {
            progress.best_val_dice = record.val_dice;
            progress.best_epoch = epoch;
            if let Some(dir) = run_dir.filter(|_| config.save_checkpoint) {
                let ckpt = dir.checkpoint();
                let mut tmp = ckpt.as_os_str().to_owned();
                tmp.push(".tmp");
                model.save(Path::new(&tmp))?;
                std::fs::rename(&tmp, &ckpt)?;
            }
        }
        if let Some(dir) = run_dir {
            dir.write_history(history)?;
        }

        let decision = schedule.end_epoch(record.val_dice);
        if decision.stop {
            break;
        }
        if let Some(limit) = config.time_budget_secs {
            let used = start.elapsed().as_secs_f64();
            if used > limit && epoch < config.max_epochs {
                return Err(Error::OutOfBudget(format!(
                    "{used:.0} s used after epoch {epoch}, limit {limit:.0} s"
                )));
            }
        }
    }
    Ok(())
}

/// Trains one run inside its run directory and writes the completion
/// manifest. Divergence and budget exhaustion are recorded in the manifest
/// rather than returned as errors.
pub fn execute_run(
    runs_root: &Path,
    spec: &ModelSpec,
    aug: &AugConfig,
    data: &TrainData,
    config: &TrainConfig,
    seed: u64,
) -> Result<RunManifest> {
    let dir = RunDir::new(runs_root, spec.label, aug.label, seed);
    std::fs::create_dir_all(dir.path())?;
    let snapshot = RunConfigSnapshot {
        seed,
        train: config.clone(),
        model: spec.clone(),
        aug: aug.clone(),
    };
    write_atomic(&dir.config(), toml::to_string(&snapshot)?.as_bytes())?;
    let _ = std::fs::remove_file(dir.metrics_csv());

    let start = Instant::now();
    let manifest = match train_one(spec, aug, data, config, seed, Some(&dir)) {
        Ok(out) => RunManifest {
            model: spec.label,
            aug: aug.label,
            seed,
            status: RunStatus::Completed,
            stop_epoch: out.history.stop_epoch,
            best_epoch: out.best_epoch,
            best_val_dice: Some(out.best_val_dice),
            lr_history: out.lr_history,
            parameters: out.parameters,
            elapsed_secs: out.elapsed_secs,
            error: None,
        },
        Err(e @ (Error::DivergenceDetected { .. } | Error::OutOfBudget(_))) => {
            log::warn!("{} {} seed {seed}: {e}", spec.label, aug.label);
            let records = RunHistory::read_records(&dir.metrics_csv()).unwrap_or_default();
            let stop_epoch = match &e {
                Error::DivergenceDetected { epoch, .. } => *epoch,
                _ => records.last().map_or(0, |r| r.epoch),
            };
            if records.is_empty() {
                dir.write_history(&RunHistory::new(spec.label, aug.label, seed))?;
            }
            let best = records
                .iter()
                .max_by(|a, b| a.val_dice.total_cmp(&b.val_dice));
            RunManifest {
                model: spec.label,
                aug: aug.label,
                seed,
                status: match e {
                    Error::DivergenceDetected { .. } => RunStatus::Diverged,
                    _ => RunStatus::OutOfBudget,
                },
                stop_epoch,
                best_epoch: best.map_or(0, |r| r.epoch),
                best_val_dice: best.map(|r| r.val_dice),
                lr_history: Vec::new(),
                parameters: 0,
                elapsed_secs: start.elapsed().as_secs_f64(),
                error: Some(e.to_string()),
            }
        }
        Err(e) => return Err(e),
    };
    write_atomic(&dir.manifest(), (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
    Ok(manifest)
}

/// Settings for repeatedly fitting one fixed batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitConfig {
    pub max_steps: usize,
    pub target_dice: f64,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for OverfitConfig {
    fn default() -> Self {
        Self {
            max_steps: 200,
            target_dice: 0.95,
            lr: 0.01,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub model: ModelLabel,
    /// Training-mode dice before each update.
    pub dice_history: Vec<f64>,
    /// First step (1-based) whose dice reached the target.
    pub reached_at: Option<usize>,
}

impl OverfitReport {
    pub fn reached(&self) -> bool {
        self.reached_at.is_some()
    }

    pub fn best_dice(&self) -> f64 {
        self.dice_history.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Fits a single unaugmented batch until training dice reaches the target.
pub fn overfit_batch(spec: &ModelSpec, batch: &[Sample], config: &OverfitConfig, seed: u64) -> Result<OverfitReport> {
    let first = batch.first().ok_or(Error::NoData)?;
    let (h, w) = first.shape();
    let model = Model::new(&spec.clone().with_input(h, w), init_seed(seed))?;
    let x = samples_to_tensor(batch, model.dtype())?;
    let y = masks_to_tensor(batch, model.dtype())?;
    let mut opt = Sgd::new(model.store().trainable_vars(), config.lr, config.momentum);
    let mut report = OverfitReport {
        model: spec.label,
        dice_history: Vec::new(),
        reached_at: None,
    };
    for step in 1..=config.max_steps {
        let p = model.forward(&x, Ctx::TRAIN)?;
        let loss = dice_loss_tensor(&y, &p)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::DivergenceDetected { epoch: 1, step });
        }
        report.dice_history.push(1.0 - value);
        if 1.0 - value >= config.target_dice {
            report.reached_at = Some(step);
            break;
        }
        opt.backward_step(&loss)?;
    }
    Ok(report)
}
