use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::figures::{model_color, plot_delta_curves};
use super::table::{build_table, TableKind};
use crate::error::{Error, Result};
use crate::models::ModelLabel;
use crate::train::{collect_results, write_atomic};

#[derive(Clone, Debug)]
pub struct ReportOptions {
    pub tables: Vec<TableKind>,
    pub figures: bool,
    /// Rows of the overall table; every model when empty.
    pub overall_models: Vec<ModelLabel>,
    /// Fail with `IncompleteGrid` instead of flagging missing cells.
    pub strict: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self {
            tables: TableKind::ALL.to_vec(),
            figures: true,
            overall_models: Vec::new(),
            strict: false,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReportBundle {
    pub tables: Vec<PathBuf>,
    pub figures: Vec<PathBuf>,
    pub document: PathBuf,
    pub missing: Vec<String>,
}

impl ReportBundle {
    pub fn all_paths(&self) -> Vec<&Path> {
        self.tables
            .iter()
            .chain(&self.figures)
            .map(PathBuf::as_path)
            .chain(std::iter::once(self.document.as_path()))
            .collect()
    }
}

/// Reads every finished run under `runs_root` and writes tables, figures and
/// `report.md` under `out_dir`. Output depends only on the run files.
pub fn build_report(runs_root: &Path, out_dir: &Path, options: &ReportOptions) -> Result<ReportBundle> {
    let results = collect_results(runs_root)?;
    if results.is_empty() {
        return Err(Error::NoData);
    }
    let table_dir = out_dir.join("tables");
    let mut bundle = ReportBundle::default();
    let mut doc = String::from("# Segmentation experiment report\n\n");
    let runs: usize = results.iter().map(|r| r.histories.len()).sum();
    let failed: usize = results.iter().map(|r| r.failed_seeds.len()).sum();
    let _ = writeln!(doc, "{} cells, {runs} finished runs, {failed} failed runs.\n", results.len());

    for &kind in &options.tables {
        let t = build_table(kind, &results, &options.overall_models)?;
        if options.strict {
            t.require_complete()?;
        }
        if bundle.missing.is_empty() {
            bundle.missing = t.missing.clone();
        }
        bundle.tables.extend(t.write(&table_dir)?);
        let _ = writeln!(doc, "## {}\n\n{}", kind.title(), t.to_markdown());
    }

    if options.figures {
        let fig_dir = out_dir.join("figures");
        bundle.figures = plot_delta_curves(&results, &fig_dir)?;
        doc.push_str("## Train/validation gap per epoch\n\n");
        for p in bundle.figures.iter().filter(|p| p.extension().is_some_and(|e| e == "png")) {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let _ = writeln!(doc, "![{name}](figures/{name})\n");
        }
        doc.push_str("Line colors:\n\n");
        let mut models: Vec<ModelLabel> = results.iter().map(|r| r.model).collect();
        models.dedup();
        for m in models {
            let [r, g, b] = model_color(m);
            let _ = writeln!(doc, "- {}: #{r:02x}{g:02x}{b:02x}", m.table_name());
        }
        doc.push('\n');
    }

    bundle.document = out_dir.join("report.md");
    write_atomic(&bundle.document, doc.as_bytes())?;
    Ok(bundle)
}
