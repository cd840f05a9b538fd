use std::path::Path;
use std::process::{Command, Output};

use lesionseg_core::dataset::write_synthetic_dataset;

fn lesionseg(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesionseg"))
        .args(args)
        .current_dir(cwd)
        .env_remove("LESIONSEG_DEVICE")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout_lines(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stdout).lines().map(str::to_string).collect()
}

fn prepared(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_dataset(&dir.path().join("data"), n, 48, 3).unwrap();
    let o = lesionseg(&["prepare", "--data-root", "data", "--out", "split.json", "--seed", "5"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn prepare_is_reproducible() {
    let dir = prepared(10);
    let first = std::fs::read(dir.path().join("split.json")).unwrap();
    let o = lesionseg(&["prepare", "--data-root", "data", "--out", "again.json", "--seed", "5"], dir.path());
    assert_eq!(stdout_lines(&o), vec!["again.json"]);
    assert_eq!(std::fs::read(dir.path().join("again.json")).unwrap(), first);
    let m: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!((m["train"].as_array().unwrap().len(), m["val"].as_array().unwrap().len()), (8, 2));
}

#[test]
fn prepare_reports_missing_masks() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 3, 16, 1).unwrap();
    let gt = data.join("ISBI2016_ISIC_Part1_Training_GroundTruth/ISIC_0000001_Segmentation.png");
    std::fs::remove_file(gt).unwrap();
    let o = lesionseg(&["prepare", "--data-root", "data"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("ISIC_0000001.jpg"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = prepared(6);
    let cases: [&[&str]; 6] = [
        &["train", "--model", "NOPE", "--split", "split.json"],
        &["train", "--model", "UNET", "--aug", "AUG-9"],
        &["preview-aug", "--aug", "AUG-7"],
        &["report", "--runs", "missing_runs"],
        &["train", "--model", "UNET", "--split", "split.json", "--image-size", "50"],
        &["frobnicate"],
    ];
    for args in cases {
        let o = lesionseg(args, dir.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    std::fs::create_dir(dir.path().join("empty_runs")).unwrap();
    assert_eq!(lesionseg(&["report", "--runs", "empty_runs"], dir.path()).status.code(), Some(2));
}

#[test]
fn unsupported_device_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lesionseg"))
        .args(["registry", "--out", "r.json"])
        .current_dir(dir.path())
        .env("LESIONSEG_DEVICE", "cuda:0")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_evaluate_report_round_trip() {
    let dir = prepared(10);
    let common = ["--split", "split.json", "--runs", "runs", "--epochs", "2", "--image-size", "32", "--batch-size", "4"];
    let mut args = vec!["train", "--model", "UAG", "--aug", "AUG-2", "--seed", "1"];
    args.extend(common);
    let o = lesionseg(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_lines(&o), vec!["runs/UAG/AUG-2/1"]);
    let csv = std::fs::read_to_string(dir.path().join("runs/UAG/AUG-2/1/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 7);
    assert_eq!(csv.lines().count(), 3);

    let o = lesionseg(&["evaluate", "--model", "UAG", "--aug", "AUG-2", "--seed", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join(&stdout_lines(&o)[0])).unwrap()).unwrap();
    assert_eq!(eval["samples"], 2);

    let o = lesionseg(&["report", "--runs", "runs", "--out", "rep", "--overlays", "--overlay-aug", "AUG-2"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = stdout_lines(&o);
    for kind in ["by_model", "by_aug", "speed", "overfitting", "overall", "per_aug_detail"] {
        assert!(lines.contains(&format!("rep/tables/{kind}.csv")), "{kind}");
    }
    assert!(lines.contains(&"rep/report.md".to_string()));
    assert!(lines.contains(&"rep/figures/overlays.png".to_string()));
    let first = std::fs::read(dir.path().join("rep/tables/by_model.txt")).unwrap();
    lesionseg(&["report", "--runs", "runs", "--out", "rep"], dir.path());
    assert_eq!(std::fs::read(dir.path().join("rep/tables/by_model.txt")).unwrap(), first);

    let o = lesionseg(
        &[
            "predict",
            "--model",
            "UAG",
            "--checkpoint",
            "runs/UAG/AUG-2/1/UAG_AUG-2_1.ckpt",
            "--image-size",
            "32",
            "--images",
            "data/ISBI2016_ISIC_Part1_Training_Data/ISIC_0000000.jpg",
            "--out",
            "pred",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_lines(&o), vec!["pred/ISIC_0000000_mask.png"]);
}

#[test]
fn grid_creates_one_directory_per_run_and_resumes() {
    let dir = prepared(8);
    let args = [
        "grid", "--models", "UAG,MCGU", "--augs", "AUG-1,AUG-3", "--seeds", "1", "--jobs", "2", "--split",
        "split.json", "--runs", "runs", "--epochs", "1", "--image-size", "32", "--batch-size", "4",
    ];
    let o = lesionseg(&args, dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout_lines(&o).len(), 4);
    let manifest = dir.path().join("runs/MCGU/AUG-3/1/manifest.json");
    let before = std::fs::read(&manifest).unwrap();
    let o = lesionseg(&args, dir.path());
    assert!(o.status.success());
    assert_eq!(std::fs::read(&manifest).unwrap(), before);
}

#[test]
fn preview_panels() {
    let dir = tempfile::tempdir().unwrap();
    let o = lesionseg(&["preview-aug", "--aug", "AUG-3", "--samples", "3", "--image-size", "64", "--seed", "2", "--out", "pv"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let paths = stdout_lines(&o);
    assert_eq!(paths.len(), 3);
    let img = image::open(dir.path().join(&paths[0])).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (128, 128));
    let changed = (0..64u32)
        .flat_map(|y| (0..64u32).map(move |x| (x, y)))
        .filter(|&(x, y)| img.get_pixel(x, y) != img.get_pixel(x + 64, y))
        .count();
    assert!(changed > 0, "augmented panel differs from the original");
    let again = lesionseg(&["preview-aug", "--aug", "AUG-3", "--samples", "3", "--image-size", "64", "--seed", "2", "--out", "pv2"], dir.path());
    let b = image::open(dir.path().join(&stdout_lines(&again)[0])).unwrap().to_rgb8();
    assert_eq!(img, b);
}
