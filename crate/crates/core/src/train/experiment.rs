use std::collections::VecDeque;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::run::{execute_run, RunDir, RunStatus, TrainData};
use crate::augment::{AugConfig, AugLabel};
use crate::error::{Error, Result};
use crate::metrics::{training_speed, BestMetrics, MeanStd, Metric, RunHistory, SPEED_THRESHOLD};
use crate::models::{ModelLabel, ModelSpec};

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
/// ΔM is pooled over epochs strictly after this one.
pub const OVERFIT_AFTER_EPOCH: usize = 15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeedStats {
    /// Crossing epoch of every seed that crossed.
    pub epochs: Vec<usize>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Seeds that never crossed or did not finish.
    pub failures: usize,
}

/// Aggregate of the repeated runs of one (model, augmentation) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub model: ModelLabel,
    pub aug: AugLabel,
    /// Histories of runs that finished; diverged runs are listed separately.
    pub histories: Vec<RunHistory>,
    pub failed_seeds: Vec<u64>,
    /// Per-seed bests averaged, in `BestMetrics::COLUMNS` order.
    pub best: Vec<MeanStd>,
    pub speed: SpeedStats,
    /// Pooled per-epoch ΔM after epoch 15, in `Metric::ALL` order.
    pub delta_after: Vec<Option<MeanStd>>,
}

impl ExperimentResult {
    pub fn from_histories(
        model: ModelLabel,
        aug: AugLabel,
        histories: Vec<RunHistory>,
        failed_seeds: Vec<u64>,
    ) -> Result<Self> {
        if histories.is_empty() {
            return Err(Error::EmptyHistory);
        }
        let bests = histories.iter().map(RunHistory::best).collect::<Result<Vec<BestMetrics>>>()?;
        let best = (0..BestMetrics::COLUMNS.len())
            .map(|k| MeanStd::of(&bests.iter().map(|b| b.as_array()[k]).collect::<Vec<_>>()).expect("non-empty"))
            .collect();
        let mut epochs = Vec::new();
        for h in &histories {
            if let Some(e) = training_speed(h, SPEED_THRESHOLD)?.epoch() {
                epochs.push(e);
            }
        }
        let stats = MeanStd::of(&epochs.iter().map(|&e| e as f64).collect::<Vec<_>>());
        let speed = SpeedStats {
            failures: histories.len() - epochs.len() + failed_seeds.len(),
            mean: stats.map(|s| s.mean),
            std: stats.map(|s| s.std),
            epochs,
        };
        let delta_after = Metric::ALL
            .iter()
            .map(|&m| {
                let pooled: Vec<f64> = histories.iter().flat_map(|h| h.deltas_after(m, OVERFIT_AFTER_EPOCH)).collect();
                MeanStd::of(&pooled)
            })
            .collect();
        Ok(Self {
            model,
            aug,
            histories,
            failed_seeds,
            best,
            speed,
            delta_after,
        })
    }

    pub fn best_column(&self, column: &str) -> Option<MeanStd> {
        BestMetrics::COLUMNS
            .iter()
            .position(|c| *c == column)
            .map(|k| self.best[k])
    }

    pub fn delta(&self, metric: Metric) -> Option<MeanStd> {
        let k = Metric::ALL.iter().position(|&m| m == metric)?;
        self.delta_after[k]
    }

    /// Seeds contributing to this cell, finished or not.
    pub fn seeds(&self) -> Vec<u64> {
        let mut s: Vec<u64> = self.histories.iter().map(|h| h.seed).chain(self.failed_seeds.iter().copied()).collect();
        s.sort_unstable();
        s
    }
}

/// Reads the runs of one cell from disk. Seeds without a manifest are
/// skipped; diverged and out-of-budget runs count as failures.
pub fn load_experiment(runs_root: &Path, model: ModelLabel, aug: AugLabel, seeds: &[u64]) -> Result<Option<ExperimentResult>> {
    let mut histories = Vec::new();
    let mut failed = Vec::new();
    for &seed in seeds {
        let dir = RunDir::new(runs_root, model, aug, seed);
        let Ok(manifest) = dir.read_manifest() else { continue };
        match manifest.status {
            RunStatus::Completed => histories.push(dir.read_history()?),
            _ => failed.push(seed),
        }
    }
    if histories.is_empty() {
        return Ok(None);
    }
    ExperimentResult::from_histories(model, aug, histories, failed).map(Some)
}

/// Every cell with at least one finished run under `runs_root`.
pub fn collect_results(runs_root: &Path) -> Result<Vec<ExperimentResult>> {
    let mut out = Vec::new();
    for model in ModelLabel::ALL {
        for aug in AugLabel::ALL {
            let dir = runs_root.join(model.name()).join(aug.name());
            let Ok(entries) = std::fs::read_dir(&dir) else { continue };
            let mut seeds: Vec<u64> = entries
                .filter_map(|e| e.ok()?.file_name().to_str()?.parse().ok())
                .collect();
            seeds.sort_unstable();
            if let Some(r) = load_experiment(runs_root, model, aug, &seeds)? {
                out.push(r);
            }
        }
    }
    Ok(out)
}

/// Trains every seed of one cell that has no manifest yet, then aggregates.
pub fn run_experiment(
    runs_root: &Path,
    spec: &ModelSpec,
    aug: &AugConfig,
    seeds: &[u64],
    data: &TrainData,
    config: &TrainConfig,
) -> Result<ExperimentResult> {
    for &seed in seeds {
        if !RunDir::new(runs_root, spec.label, aug.label, seed).is_complete() {
            execute_run(runs_root, spec, aug, data, config, seed)?;
        }
    }
    load_experiment(runs_root, spec.label, aug.label, seeds)?.ok_or(Error::EmptyHistory)
}

/// Runs the full (model × augmentation × seed) grid with up to `jobs` runs in
/// parallel. Finished runs are skipped, so an interrupted grid resumes.
pub fn run_grid(
    runs_root: &Path,
    labels: &[ModelLabel],
    augs: &[AugLabel],
    seeds: &[u64],
    data: &TrainData,
    config: &TrainConfig,
    jobs: usize,
) -> Result<Vec<ExperimentResult>> {
    let mut pending = VecDeque::new();
    for &m in labels {
        for &a in augs {
            for &s in seeds {
                if RunDir::new(runs_root, m, a, s).is_complete() {
                    log::info!("skipping finished run {m} {a} seed {s}");
                } else {
                    pending.push_back((m, a, s));
                }
            }
        }
    }
    let queue = Mutex::new(pending);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1) {
            scope.spawn(|| loop {
                if first_error.lock().expect("lock").is_some() {
                    return;
                }
                let Some((m, a, s)) = queue.lock().expect("lock").pop_front() else { return };
                let spec = ModelSpec::default_for(m);
                let aug = AugConfig::from_label(a);
                if let Err(e) = execute_run(runs_root, &spec, &aug, data, config, s) {
                    first_error.lock().expect("lock").get_or_insert(e);
                    return;
                }
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("lock") {
        return Err(e);
    }
    let mut out = Vec::new();
    for &m in labels {
        for &a in augs {
            if let Some(r) = load_experiment(runs_root, m, a, seeds)? {
                out.push(r);
            }
        }
    }
    Ok(out)
}
