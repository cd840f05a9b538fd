//! Overlap metrics, segmentation losses, the training-speed detector and the
//! train/validation gap statistic.
//!
//! Slice-based functions take flattened masks: ground truth is binary (`0.0`
//! or `1.0`), predictions are probabilities unless stated otherwise. The
//! `*_tensor` variants compute the same quantities on `(B, 1, H, W)` tensors
//! and are what the training loop differentiates.

use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::augment::AugLabel;
use crate::error::{Error, Result};
use crate::models::ModelLabel;

pub const TVERSKY_BETA: f64 = 0.7;
pub const FOCAL_GAMMA: f64 = 0.75;
pub const SPEED_THRESHOLD: f64 = 0.8;
/// Probability threshold that turns a prediction into a binary mask.
pub const MASK_THRESHOLD: f32 = 0.5;

fn check_len(y: &[f32], p: &[f32]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::ShapeMismatch(format!(
            "ground truth has {} pixels, prediction {}",
            y.len(),
            p.len()
        )));
    }
    Ok(())
}

/// Intersection over union of two binary masks. Two empty masks score 1.
pub fn iou(y: &[f32], p: &[f32]) -> Result<f64> {
    check_len(y, p)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in y.iter().zip(p) {
        let (a, b) = (a >= MASK_THRESHOLD, b >= MASK_THRESHOLD);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Smoothed dice: `(2·Σyp + 1) / (Σy + Σp + 1)`.
pub fn dice_score(y: &[f32], p: &[f32]) -> Result<f64> {
    check_len(y, p)?;
    let (mut inter, mut sy, mut sp) = (0f64, 0f64, 0f64);
    for (&a, &b) in y.iter().zip(p) {
        inter += a as f64 * b as f64;
        sy += a as f64;
        sp += b as f64;
    }
    Ok((2.0 * inter + 1.0) / (sy + sp + 1.0))
}

pub fn dice_loss(y: &[f32], p: &[f32]) -> Result<f64> {
    Ok(1.0 - dice_score(y, p)?)
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::BadBeta(beta));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::BadGamma(gamma));
    }
    Ok(())
}

/// Tversky loss; `beta` weights false positives, `1 - beta` false negatives.
pub fn tversky_loss(y: &[f32], p: &[f32], beta: f64) -> Result<f64> {
    tversky_loss_smoothed(y, p, beta, 1.0)
}

/// Tversky loss with an explicit smoothing constant added to numerator and
/// denominator.
pub fn tversky_loss_smoothed(y: &[f32], p: &[f32], beta: f64, smooth: f64) -> Result<f64> {
    check_len(y, p)?;
    check_beta(beta)?;
    let (mut tp, mut fp, mut fn_) = (0f64, 0f64, 0f64);
    for (&a, &b) in y.iter().zip(p) {
        let (a, b) = (a as f64, b as f64);
        tp += a * b;
        fp += (1.0 - a) * b;
        fn_ += a * (1.0 - b);
    }
    Ok(1.0 - (smooth + tp) / (smooth + tp + beta * fp + (1.0 - beta) * fn_))
}

/// Focal Tversky loss for the single foreground class: `TL^gamma`.
pub fn focal_tversky_loss(y: &[f32], p: &[f32], beta: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    Ok(tversky_loss(y, p, beta)?.powf(gamma))
}

/// Absolute train/validation gap of one metric.
pub fn delta_m(train_value: f64, val_value: f64) -> f64 {
    (train_value - val_value).abs()
}

/// Per-sample metric triple.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchMetrics {
    pub dice: f64,
    pub iou: f64,
    pub ft: f64,
}

impl BatchMetrics {
    pub fn of_sample(y: &[f32], p: &[f32]) -> Result<Self> {
        Ok(Self {
            dice: dice_score(y, p)?,
            iou: iou(y, p)?,
            ft: focal_tversky_loss(y, p, TVERSKY_BETA, FOCAL_GAMMA)?,
        })
    }
}

/// Mean of per-sample metrics over `n` samples stored back to back.
pub fn batch_metrics(y: &[f32], p: &[f32], n: usize) -> Result<BatchMetrics> {
    check_len(y, p)?;
    if n == 0 || y.len() % n != 0 {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels cannot be split into {n} samples",
            y.len()
        )));
    }
    let per = y.len() / n;
    let mut acc = MetricAccumulator::default();
    for (ys, ps) in y.chunks(per).zip(p.chunks(per)) {
        acc.push(BatchMetrics::of_sample(ys, ps)?);
    }
    Ok(acc.mean().expect("n > 0"))
}

/// Running mean of [`BatchMetrics`].
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    sum: [f64; 3],
    count: usize,
}

impl MetricAccumulator {
    pub fn push(&mut self, m: BatchMetrics) {
        self.sum[0] += m.dice;
        self.sum[1] += m.iou;
        self.sum[2] += m.ft;
        self.count += 1;
    }

    pub fn mean(&self) -> Option<BatchMetrics> {
        (self.count > 0).then(|| {
            let n = self.count as f64;
            BatchMetrics {
                dice: self.sum[0] / n,
                iou: self.sum[1] / n,
                ft: self.sum[2] / n,
            }
        })
    }
}

fn per_sample_sum(t: &Tensor) -> Result<Tensor> {
    Ok(t.flatten_from(1)?.sum(1)?)
}

/// Batch mean of per-sample smoothed dice loss on `(B, …)` tensors.
pub fn dice_loss_tensor(y: &Tensor, p: &Tensor) -> Result<Tensor> {
    let inter = per_sample_sum(&(y * p)?)?;
    let denom = ((per_sample_sum(y)? + per_sample_sum(p)?)? + 1.0)?;
    let dice = ((inter * 2.0)? + 1.0)?.div(&denom)?;
    Ok(dice.affine(-1.0, 1.0)?.mean_all()?)
}

/// Batch mean of per-sample focal Tversky loss on `(B, …)` tensors.
pub fn focal_tversky_loss_tensor(y: &Tensor, p: &Tensor, beta: f64, gamma: f64) -> Result<Tensor> {
    check_beta(beta)?;
    check_gamma(gamma)?;
    let tp = per_sample_sum(&(y * p)?)?;
    let fp = per_sample_sum(&(y.affine(-1.0, 1.0)? * p)?)?;
    let fn_ = per_sample_sum(&(y * p.affine(-1.0, 1.0)?)?)?;
    let num = (&tp + 1.0)?;
    let den = (((&tp + 1.0)? + (fp * beta)?)? + (fn_ * (1.0 - beta))?)?;
    let tl = num.div(&den)?.affine(-1.0, 1.0)?;
    Ok(tl.powf(gamma)?.mean_all()?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Dice,
    Ft,
    Iou,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Dice, Metric::Ft, Metric::Iou];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Dice => "Dice",
            Metric::Ft => "FT",
            Metric::Iou => "IOU",
        }
    }
}

/// One epoch of train and validation metrics. Field names follow the
/// persisted CSV header.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub dice: f64,
    pub val_dice: f64,
    #[serde(rename = "FT")]
    pub ft: f64,
    #[serde(rename = "val_FT")]
    pub val_ft: f64,
    pub iou: f64,
    pub val_iou: f64,
}

impl MetricRecord {
    pub fn from_pair(epoch: usize, train: BatchMetrics, val: BatchMetrics) -> Self {
        Self {
            epoch,
            dice: train.dice,
            val_dice: val.dice,
            ft: train.ft,
            val_ft: val.ft,
            iou: train.iou,
            val_iou: val.iou,
        }
    }

    pub fn train(&self, m: Metric) -> f64 {
        match m {
            Metric::Dice => self.dice,
            Metric::Ft => self.ft,
            Metric::Iou => self.iou,
        }
    }

    pub fn val(&self, m: Metric) -> f64 {
        match m {
            Metric::Dice => self.val_dice,
            Metric::Ft => self.val_ft,
            Metric::Iou => self.val_iou,
        }
    }

    pub fn delta(&self, m: Metric) -> f64 {
        delta_m(self.train(m), self.val(m))
    }
}

/// Column-wise best values of a run: max for dice and IoU, min for FT.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestMetrics {
    pub dice: f64,
    pub val_dice: f64,
    pub ft: f64,
    pub val_ft: f64,
    pub iou: f64,
    pub val_iou: f64,
}

impl BestMetrics {
    pub const COLUMNS: [&'static str; 6] = ["dice", "val_dice", "FT", "val_FT", "iou", "val_iou"];

    pub fn as_array(&self) -> [f64; 6] {
        [self.dice, self.val_dice, self.ft, self.val_ft, self.iou, self.val_iou]
    }
}

/// Mean and sample standard deviation (`n - 1` denominator; 0 for one value).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Two-pass computation; `None` for an empty slice.
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        if values.iter().all(|&v| v == values[0]) {
            return Some(Self { mean: values[0], std: 0.0, n });
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, std, n })
    }
}

/// Per-epoch history of one (model, augmentation, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub model: ModelLabel,
    pub aug: AugLabel,
    pub seed: u64,
    pub records: Vec<MetricRecord>,
    pub stop_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainingSpeed {
    Epoch(usize),
    Failure,
}

impl TrainingSpeed {
    pub fn epoch(self) -> Option<usize> {
        match self {
            TrainingSpeed::Epoch(e) => Some(e),
            TrainingSpeed::Failure => None,
        }
    }
}

/// First epoch whose training dice reaches `threshold`.
pub fn training_speed(history: &RunHistory, threshold: f64) -> Result<TrainingSpeed> {
    if history.records.is_empty() {
        return Err(Error::EmptyHistory);
    }
    Ok(history
        .records
        .iter()
        .take_while(|r| r.epoch <= history.stop_epoch)
        .find(|r| r.dice >= threshold)
        .map_or(TrainingSpeed::Failure, |r| TrainingSpeed::Epoch(r.epoch)))
}

impl RunHistory {
    pub fn new(model: ModelLabel, aug: AugLabel, seed: u64) -> Self {
        Self {
            model,
            aug,
            seed,
            records: Vec::new(),
            stop_epoch: 0,
        }
    }

    /// Epochs strictly increasing from 1 and `stop_epoch` within bounds.
    pub fn check_invariants(&self, max_epochs: usize) -> Result<()> {
        let increasing = self.records.windows(2).all(|w| w[0].epoch < w[1].epoch);
        let first_ok = self.records.first().is_none_or(|r| r.epoch >= 1);
        if !increasing || !first_ok {
            return Err(Error::InvalidConfig("epochs must increase from 1".into()));
        }
        if self.stop_epoch > max_epochs {
            return Err(Error::InvalidConfig(format!(
                "stop epoch {} exceeds {max_epochs}",
                self.stop_epoch
            )));
        }
        Ok(())
    }

    pub fn best(&self) -> Result<BestMetrics> {
        if self.records.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let max = |f: fn(&MetricRecord) -> f64| self.records.iter().map(f).fold(f64::MIN, f64::max);
        let min = |f: fn(&MetricRecord) -> f64| self.records.iter().map(f).fold(f64::MAX, f64::min);
        Ok(BestMetrics {
            dice: max(|r| r.dice),
            val_dice: max(|r| r.val_dice),
            ft: min(|r| r.ft),
            val_ft: min(|r| r.val_ft),
            iou: max(|r| r.iou),
            val_iou: max(|r| r.val_iou),
        })
    }

    /// `(epoch, ΔM)` for every recorded epoch.
    pub fn delta_series(&self, metric: Metric) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.delta(metric)))
            .collect()
    }

    /// ΔM values of epochs strictly after `after_epoch`.
    pub fn deltas_after(&self, metric: Metric, after_epoch: usize) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.epoch > after_epoch)
            .map(|r| r.delta(metric))
            .collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
        let mut r = csv::Reader::from_path(path)?;
        Ok(r.deserialize().collect::<std::result::Result<Vec<_>, _>>()?)
    }
}
