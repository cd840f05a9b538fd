use lesionseg_core::augment::AugLabel;
use lesionseg_core::dataset::synthetic_samples;
use lesionseg_core::metrics::{MetricRecord, RunHistory};
use lesionseg_core::models::{default_threshold, Model, ModelLabel, ModelSpec};
use lesionseg_core::report::{
    build_report, build_table, mask_to_rgb, render_overlays, ReportOptions, TableKind,
};
use lesionseg_core::train::{collect_results, RunDir, RunManifest, RunStatus};
use lesionseg_core::Error;
use std::path::Path;

/// Writes a finished run whose val dice rises then plateaus.
fn fake_run(root: &Path, model: ModelLabel, aug: AugLabel, seed: u64, level: f64, gap: f64, epochs: usize) {
    let dir = RunDir::new(root, model, aug, seed);
    std::fs::create_dir_all(dir.path()).unwrap();
    let mut h = RunHistory::new(model, aug, seed);
    for e in 1..=epochs {
        let v = level * (1.0 - (-(e as f64) / 4.0).exp()) + 0.001 * seed as f64;
        h.records.push(MetricRecord {
            epoch: e,
            dice: v + gap,
            val_dice: v,
            ft: 1.0 - v - gap,
            val_ft: 1.0 - v,
            iou: v - 0.08 + gap,
            val_iou: v - 0.08,
        });
    }
    h.stop_epoch = epochs;
    h.write_csv(&dir.metrics_csv()).unwrap();
    let m = RunManifest {
        model,
        aug,
        seed,
        status: RunStatus::Completed,
        stop_epoch: epochs,
        best_epoch: epochs,
        best_val_dice: None,
        lr_history: vec![0.01; epochs],
        parameters: 0,
        elapsed_secs: 0.0,
        error: None,
    };
    std::fs::write(dir.manifest(), serde_json::to_string(&m).unwrap()).unwrap();
}

fn fake_grid(root: &Path) {
    for (k, model) in [ModelLabel::Ur50, ModelLabel::Unet, ModelLabel::Uag].into_iter().enumerate() {
        for aug in [AugLabel::Aug1, AugLabel::Aug2] {
            for seed in 1..=3 {
                fake_run(root, model, aug, seed, 0.92 - 0.05 * k as f64, 0.01 * (k + 1) as f64, 25);
            }
        }
    }
}

#[test]
fn report_is_byte_identical_on_regeneration() {
    let runs = tempfile::tempdir().unwrap();
    fake_grid(runs.path());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ba = build_report(runs.path(), a.path(), &ReportOptions::default()).unwrap();
    let bb = build_report(runs.path(), b.path(), &ReportOptions::default()).unwrap();
    assert_eq!(ba.tables.len(), 12);
    for (x, y) in ba.all_paths().iter().zip(bb.all_paths()) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    let doc = std::fs::read_to_string(&ba.document).unwrap();
    for k in TableKind::ALL {
        assert!(doc.contains(k.title()));
    }
}

#[test]
fn shared_cells_agree_across_tables() {
    let runs = tempfile::tempdir().unwrap();
    fake_grid(runs.path());
    let results = collect_results(runs.path()).unwrap();
    let t = |k| build_table(k, &results, &[]).unwrap();
    let (by_model, speed, over, overall) = (
        t(TableKind::ByModel),
        t(TableKind::Speed),
        t(TableKind::Overfitting),
        t(TableKind::Overall),
    );
    for row in ["UR50", "U-Net", "UAG"] {
        let val = |tab: &lesionseg_core::TableArtifact, c: &str| tab.cell(row, c).unwrap().value.clone();
        assert_eq!(val(&overall, "val_dice"), val(&by_model, "val_dice"));
        assert_eq!(val(&overall, "val_iou"), val(&by_model, "val_iou"));
        assert_eq!(val(&overall, "speed"), val(&speed, "epoch"));
        assert_eq!(val(&overall, "Δdice"), val(&over, "ΔDice"));
    }
    assert!(overall.cell("UR50", "val_dice").unwrap().best);
    // Constant per-epoch gap 0.01 for UR50.
    assert_eq!(over.cell("UR50", "ΔDice").unwrap().render(), "0.01±0.0");
    assert!(over.missing.is_empty());
}

#[test]
fn incomplete_grid_is_flagged() {
    let runs = tempfile::tempdir().unwrap();
    fake_run(runs.path(), ModelLabel::Unet, AugLabel::Aug1, 1, 0.9, 0.0, 5);
    fake_run(runs.path(), ModelLabel::Unet, AugLabel::Aug2, 1, 0.9, 0.0, 5);
    fake_run(runs.path(), ModelLabel::Uc, AugLabel::Aug1, 1, 0.9, 0.0, 5);
    let out = tempfile::tempdir().unwrap();
    let loose = build_report(runs.path(), out.path(), &ReportOptions::default()).unwrap();
    assert_eq!(loose.missing, vec!["UC/AUG-2".to_string()]);
    let strict = ReportOptions {
        strict: true,
        ..ReportOptions::default()
    };
    assert!(matches!(build_report(runs.path(), out.path(), &strict), Err(Error::IncompleteGrid(_))));
}

#[test]
fn empty_runs_have_no_data() {
    let runs = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    assert!(matches!(build_report(runs.path(), out.path(), &ReportOptions::default()), Err(Error::NoData)));
}

#[test]
fn overlay_grid_layout_and_panels() {
    let samples = synthetic_samples(3, 32, 4);
    let a = Model::new(&ModelSpec::default_for(ModelLabel::Uag).with_input(32, 32), 1).unwrap();
    let b = Model::new(&ModelSpec::default_for(ModelLabel::Mcgu).with_input(32, 32), 2).unwrap();
    let grid = render_overlays(&[&a, &b], &samples, default_threshold()).unwrap();
    assert_eq!((grid.rows, grid.cols), (3, 4));
    assert_eq!(grid.image.dimensions(), (4 * 32, 3 * 32));
    for (r, s) in samples.iter().enumerate() {
        assert_eq!(grid.panel_image(r, 1), mask_to_rgb(&s.mask));
        assert_eq!(grid.panel_image(r, 3), mask_to_rgb(&b.predict_mask(s, default_threshold()).unwrap()));
    }
}
