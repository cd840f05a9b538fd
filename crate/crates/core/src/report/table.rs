use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugLabel;
use crate::error::{Error, Result};
use crate::metrics::{training_speed, BestMetrics, MeanStd, Metric, RunHistory, SPEED_THRESHOLD};
use crate::models::ModelLabel;
use crate::train::{write_atomic, ExperimentResult, OVERFIT_AFTER_EPOCH};

pub const METRIC_DECIMALS: usize = 2;
pub const DELTA_DECIMALS: usize = 3;
pub const SPEED_DECIMALS: usize = 1;
pub const UNDEFINED: &str = "—";

const STD_NOTE: &str = "± is the sample standard deviation (n − 1 denominator) over runs.";
const BEST_NOTE: &str = "Best values are taken independently per column, so one row may mix epochs.";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    ByModel,
    ByAug,
    Speed,
    Overfitting,
    Overall,
    PerAugDetail,
}

impl TableKind {
    pub const ALL: [TableKind; 6] = [
        TableKind::ByModel,
        TableKind::ByAug,
        TableKind::Speed,
        TableKind::Overfitting,
        TableKind::Overall,
        TableKind::PerAugDetail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TableKind::ByModel => "by_model",
            TableKind::ByAug => "by_aug",
            TableKind::Speed => "speed",
            TableKind::Overfitting => "overfitting",
            TableKind::Overall => "overall",
            TableKind::PerAugDetail => "per_aug_detail",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            TableKind::ByModel => "Best metrics per model, pooled over augmentations",
            TableKind::ByAug => "Best metrics per augmentation, pooled over models",
            TableKind::Speed => "Training speed: first epoch with train dice ≥ 0.8",
            TableKind::Overfitting => "Train/validation gap after epoch 15",
            TableKind::Overall => "Overall comparison",
            TableKind::PerAugDetail => "Best metrics per augmentation and model",
        }
    }
}

impl std::str::FromStr for TableKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        TableKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

/// Rounds like Python's `round(x, d)` and prints the shortest repr, so
/// `0.004` at two decimals becomes `"0.0"`.
pub fn py_round(x: f64, decimals: usize) -> String {
    if !x.is_finite() {
        return UNDEFINED.to_string();
    }
    let r: f64 = format!("{x:.decimals$}").parse().expect("formatted float");
    let r = if r == 0.0 { 0.0 } else { r };
    let s = format!("{r}");
    if s.contains('.') || s.contains('e') {
        s
    } else {
        s + ".0"
    }
}

pub fn format_mean_std(m: &MeanStd, decimals: usize) -> String {
    format!("{}±{}", py_round(m.mean, decimals), py_round(m.std, decimals))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum CellValue {
    Stat(MeanStd),
    Count(usize),
    Missing,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: CellValue,
    pub decimals: usize,
    pub best: bool,
}

impl Cell {
    fn stat(m: Option<MeanStd>, decimals: usize) -> Self {
        Self {
            value: m.map_or(CellValue::Missing, CellValue::Stat),
            decimals,
            best: false,
        }
    }

    fn count(n: usize) -> Self {
        Self {
            value: CellValue::Count(n),
            decimals: 0,
            best: false,
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match self.value {
            CellValue::Stat(m) => Some(m.mean),
            CellValue::Count(n) => Some(n as f64),
            CellValue::Missing => None,
        }
    }

    pub fn render(&self) -> String {
        let s = match &self.value {
            CellValue::Stat(m) => format_mean_std(m, self.decimals),
            CellValue::Count(n) => n.to_string(),
            CellValue::Missing => UNDEFINED.to_string(),
        };
        if self.best {
            s + " *"
        } else {
            s
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub cells: Vec<Cell>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableArtifact {
    pub kind: TableKind,
    pub columns: Vec<String>,
    pub rows: Vec<TableRow>,
    /// `MODEL/AUG/seed` of every run that fed a cell.
    pub provenance: Vec<String>,
    /// Grid cells expected but absent, as `MODEL/AUG`.
    pub missing: Vec<String>,
    pub footnotes: Vec<String>,
}

impl TableArtifact {
    pub fn row(&self, label: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn cell(&self, row: &str, column: &str) -> Option<&Cell> {
        let k = self.columns.iter().position(|c| c == column)?;
        self.row(row).map(|r| &r.cells[k])
    }

    pub fn require_complete(&self) -> Result<()> {
        if self.missing.is_empty() {
            Ok(())
        } else {
            Err(Error::IncompleteGrid(self.missing.clone()))
        }
    }

    /// Full-precision CSV: `mean`/`std`/`n` per statistic column.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string()];
        for c in &self.columns {
            header.extend([format!("{c}_mean"), format!("{c}_std"), format!("{c}_n")]);
        }
        if self.kind == TableKind::Overall {
            header.push("best".into());
        }
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.label.clone()];
            for c in &r.cells {
                match &c.value {
                    CellValue::Stat(m) => rec.extend([m.mean.to_string(), m.std.to_string(), m.n.to_string()]),
                    CellValue::Count(n) => rec.extend([n.to_string(), String::new(), String::new()]),
                    CellValue::Missing => rec.extend([String::new(), String::new(), String::new()]),
                }
            }
            if self.kind == TableKind::Overall {
                let best: Vec<&str> = self
                    .columns
                    .iter()
                    .zip(&r.cells)
                    .filter(|(_, c)| c.best)
                    .map(|(n, _)| n.as_str())
                    .collect();
                rec.push(best.join(";"));
            }
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    fn grid(&self) -> Vec<Vec<String>> {
        let mut g = vec![std::iter::once(String::new()).chain(self.columns.iter().cloned()).collect()];
        for r in &self.rows {
            g.push(std::iter::once(r.label.clone()).chain(r.cells.iter().map(Cell::render)).collect());
        }
        g
    }

    pub fn to_text(&self) -> String {
        let g = self.grid();
        let widths: Vec<usize> = (0..g[0].len())
            .map(|k| g.iter().map(|r| r[k].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("{}\n\n", self.kind.title());
        for (i, r) in g.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        self.append_notes(&mut out, "");
        out
    }

    pub fn to_markdown(&self) -> String {
        let g = self.grid();
        let mut out = String::new();
        let _ = writeln!(out, "| {} |", g[0].join(" | "));
        let _ = writeln!(out, "|{}", "---|".repeat(g[0].len()));
        for r in &g[1..] {
            let _ = writeln!(out, "| {} |", r.join(" | "));
        }
        self.append_notes(&mut out, "- ");
        out
    }

    fn append_notes(&self, out: &mut String, bullet: &str) {
        if !self.footnotes.is_empty() || !self.missing.is_empty() {
            out.push('\n');
        }
        for f in &self.footnotes {
            let _ = writeln!(out, "{bullet}{f}");
        }
        if !self.missing.is_empty() {
            let _ = writeln!(out, "{bullet}Missing cells: {}", self.missing.join(", "));
        }
    }

    /// Writes `{kind}.csv` and `{kind}.txt` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let csv = dir.join(format!("{}.csv", self.kind.name()));
        let txt = dir.join(format!("{}.txt", self.kind.name()));
        write_atomic(&csv, self.to_csv()?.as_bytes())?;
        write_atomic(&txt, self.to_text().as_bytes())?;
        Ok(vec![csv, txt])
    }
}

fn models_in(results: &[ExperimentResult]) -> Vec<ModelLabel> {
    results.iter().map(|r| r.model).collect::<BTreeSet<_>>().into_iter().collect()
}

fn augs_in(results: &[ExperimentResult]) -> Vec<AugLabel> {
    results.iter().map(|r| r.aug).collect::<BTreeSet<_>>().into_iter().collect()
}

/// Every (model, aug) pair of the observed labels that has no result.
fn missing_cells(results: &[ExperimentResult]) -> Vec<String> {
    let mut out = Vec::new();
    for m in models_in(results) {
        for a in augs_in(results) {
            if !results.iter().any(|r| r.model == m && r.aug == a) {
                out.push(format!("{m}/{a}"));
            }
        }
    }
    out
}

fn provenance<'a>(results: impl IntoIterator<Item = &'a ExperimentResult>) -> Vec<String> {
    let mut ids: Vec<String> = results
        .into_iter()
        .flat_map(|r| r.histories.iter().map(move |h| format!("{}/{}/{}", r.model, r.aug, h.seed)))
        .collect();
    ids.sort();
    ids
}

fn best_columns(histories: &[&RunHistory]) -> Result<Vec<Cell>> {
    let bests = histories.iter().map(|h| h.best()).collect::<Result<Vec<BestMetrics>>>()?;
    Ok((0..BestMetrics::COLUMNS.len())
        .map(|k| Cell::stat(MeanStd::of(&bests.iter().map(|b| b.as_array()[k]).collect::<Vec<_>>()), METRIC_DECIMALS))
        .collect())
}

fn histories_where<'a>(results: &'a [ExperimentResult], pred: impl Fn(&ExperimentResult) -> bool) -> Vec<&'a RunHistory> {
    results.iter().filter(|r| pred(r)).flat_map(|r| r.histories.iter()).collect()
}

fn best_metric_table(
    kind: TableKind,
    results: &[ExperimentResult],
    groups: Vec<(String, Vec<&ExperimentResult>)>,
) -> Result<TableArtifact> {
    let mut rows = Vec::new();
    for (label, rs) in &groups {
        let hs: Vec<&RunHistory> = rs.iter().flat_map(|r| r.histories.iter()).collect();
        rows.push(TableRow {
            label: label.clone(),
            cells: best_columns(&hs)?,
        });
    }
    Ok(TableArtifact {
        kind,
        columns: BestMetrics::COLUMNS.iter().map(|s| s.to_string()).collect(),
        rows,
        provenance: provenance(results),
        missing: missing_cells(results),
        footnotes: vec![STD_NOTE.into(), BEST_NOTE.into()],
    })
}

/// Per-model mean±std of per-run bests, pooled over augmentations and seeds.
pub fn table_by_model(results: &[ExperimentResult]) -> Result<TableArtifact> {
    let groups = models_in(results)
        .into_iter()
        .map(|m| (m.table_name().to_string(), results.iter().filter(|r| r.model == m).collect()))
        .collect();
    best_metric_table(TableKind::ByModel, results, groups)
}

/// Per-augmentation mean±std of per-run bests, pooled over models and seeds.
pub fn table_by_aug(results: &[ExperimentResult]) -> Result<TableArtifact> {
    let groups = augs_in(results)
        .into_iter()
        .map(|a| (a.name().to_string(), results.iter().filter(|r| r.aug == a).collect()))
        .collect();
    best_metric_table(TableKind::ByAug, results, groups)
}

/// One row per (augmentation, model) cell.
pub fn table_per_aug_detail(results: &[ExperimentResult]) -> Result<TableArtifact> {
    let mut groups = Vec::new();
    for a in augs_in(results) {
        for m in models_in(results) {
            if let Some(r) = results.iter().find(|r| r.model == m && r.aug == a) {
                groups.push((format!("{a} {}", m.table_name()), vec![r]));
            }
        }
    }
    best_metric_table(TableKind::PerAugDetail, results, groups)
}

struct SpeedSummary {
    mean: Option<MeanStd>,
    failures: usize,
}

fn speed_summary(results: &[ExperimentResult], model: ModelLabel, threshold: f64) -> Result<SpeedSummary> {
    let mut epochs = Vec::new();
    let mut failures = 0;
    for r in results.iter().filter(|r| r.model == model) {
        failures += r.failed_seeds.len();
        for h in &r.histories {
            match training_speed(h, threshold)?.epoch() {
                Some(e) => epochs.push(e as f64),
                None => failures += 1,
            }
        }
    }
    Ok(SpeedSummary {
        mean: MeanStd::of(&epochs),
        failures,
    })
}

/// Mean±std crossing epoch over runs that crossed, and the failure count.
pub fn table_speed(results: &[ExperimentResult], threshold: f64) -> Result<TableArtifact> {
    let mut rows = Vec::new();
    for m in models_in(results) {
        let s = speed_summary(results, m, threshold)?;
        rows.push(TableRow {
            label: m.table_name().to_string(),
            cells: vec![Cell::stat(s.mean, SPEED_DECIMALS), Cell::count(s.failures)],
        });
    }
    Ok(TableArtifact {
        kind: TableKind::Speed,
        columns: vec!["epoch".into(), "failures".into()],
        rows,
        provenance: provenance(results),
        missing: missing_cells(results),
        footnotes: vec![
            format!("Threshold {threshold}; the epoch statistic covers only runs that crossed it."),
            format!("{UNDEFINED} marks a model with no crossing run."),
            STD_NOTE.into(),
        ],
    })
}

fn pooled_delta(histories: &[&RunHistory], metric: Metric, after: usize) -> Option<MeanStd> {
    let v: Vec<f64> = histories.iter().flat_map(|h| h.deltas_after(metric, after)).collect();
    MeanStd::of(&v)
}

/// Per-model |train − val| over all epochs after `after_epoch`, pooled over
/// augmentations and seeds.
pub fn table_overfitting(results: &[ExperimentResult], after_epoch: usize) -> Result<TableArtifact> {
    let mut rows = Vec::new();
    for m in models_in(results) {
        let hs = histories_where(results, |r| r.model == m);
        rows.push(TableRow {
            label: m.table_name().to_string(),
            cells: Metric::ALL
                .iter()
                .map(|&k| Cell::stat(pooled_delta(&hs, k, after_epoch), DELTA_DECIMALS))
                .collect(),
        });
    }
    Ok(TableArtifact {
        kind: TableKind::Overfitting,
        columns: Metric::ALL.iter().map(|m| format!("Δ{}", m.name())).collect(),
        rows,
        provenance: provenance(results),
        missing: missing_cells(results),
        footnotes: vec![
            format!("Gaps pooled over every epoch after {after_epoch} of every run."),
            STD_NOTE.into(),
        ],
    })
}

/// Headline columns for `models` (all observed models when empty), with the
/// best cell of each column flagged.
pub fn table_overall(results: &[ExperimentResult], models: &[ModelLabel]) -> Result<TableArtifact> {
    let chosen: Vec<ModelLabel> = if models.is_empty() {
        models_in(results)
    } else {
        models.iter().copied().filter(|m| results.iter().any(|r| r.model == *m)).collect()
    };
    let mut rows = Vec::new();
    for &m in &chosen {
        let hs = histories_where(results, |r| r.model == m);
        let best = best_columns(&hs)?;
        let speed = speed_summary(results, m, SPEED_THRESHOLD)?;
        rows.push(TableRow {
            label: m.table_name().to_string(),
            cells: vec![
                best[1].clone(),
                best[5].clone(),
                Cell::stat(speed.mean, SPEED_DECIMALS),
                Cell::stat(pooled_delta(&hs, Metric::Dice, OVERFIT_AFTER_EPOCH), DELTA_DECIMALS),
                Cell::stat(pooled_delta(&hs, Metric::Iou, OVERFIT_AFTER_EPOCH), DELTA_DECIMALS),
            ],
        });
    }
    // Higher is better for the first two columns, lower for the rest.
    for k in 0..5 {
        let better = |a: f64, b: f64| if k < 2 { a > b } else { a < b };
        let best = rows
            .iter()
            .filter_map(|r| r.cells[k].mean())
            .fold(None, |acc: Option<f64>, v| match acc {
                Some(b) if !better(v, b) => Some(b),
                _ => Some(v),
            });
        if let Some(b) = best {
            for r in &mut rows {
                r.cells[k].best = r.cells[k].mean() == Some(b);
            }
        }
    }
    let subset: Vec<&ExperimentResult> = results.iter().filter(|r| chosen.contains(&r.model)).collect();
    Ok(TableArtifact {
        kind: TableKind::Overall,
        columns: vec![
            "val_dice".into(),
            "val_iou".into(),
            "speed".into(),
            "Δdice".into(),
            "Δiou".into(),
        ],
        rows,
        provenance: provenance(subset.iter().copied()),
        missing: missing_cells(results),
        footnotes: vec!["* marks the best value of each column.".into(), STD_NOTE.into()],
    })
}

pub fn build_table(kind: TableKind, results: &[ExperimentResult], overall_models: &[ModelLabel]) -> Result<TableArtifact> {
    if results.is_empty() {
        return Err(Error::NoData);
    }
    match kind {
        TableKind::ByModel => table_by_model(results),
        TableKind::ByAug => table_by_aug(results),
        TableKind::Speed => table_speed(results, SPEED_THRESHOLD),
        TableKind::Overfitting => table_overfitting(results, OVERFIT_AFTER_EPOCH),
        TableKind::Overall => table_overall(results, overall_models),
        TableKind::PerAugDetail => table_per_aug_detail(results),
    }
}
