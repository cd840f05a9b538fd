use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{Context, Result};
use image::{GrayImage, RgbImage};
use lesionseg_core::augment::{build_pipeline, AugConfig, AugLabel, RngStream};
use lesionseg_core::dataset::{
    load_all, load_unlabeled, scan_dataset, split_train_val, synthetic_samples, DatasetLayout,
    Sample, Split, SplitManifest,
};
use lesionseg_core::models::{ModelLabel, ModelRegistry, ModelSpec};
use lesionseg_core::report::{
    build_report, mask_to_rgb, render_overlays, sample_to_rgb, ReportOptions, TableKind,
};
use lesionseg_core::train::{
    collect_results, evaluate as evaluate_split, execute_run, overfit_batch, run_grid, write_atomic,
    OverfitConfig, RunConfigSnapshot, RunDir, RunStatus, TrainConfig, TrainData,
};
use lesionseg_core::{Error, Model};

use crate::{
    EvaluateArgs, GridArgs, PredictArgs, PrepareArgs, PreviewArgs, RegistryArgs, ReportArgs,
    TrainArgs, TrainOpts, UsageError,
};

pub const DEVICE_VAR: &str = "LESIONSEG_DEVICE";
const OVERFIT_SAMPLES: usize = 8;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Only the CPU backend is compiled in.
pub fn check_device() -> Result<()> {
    match std::env::var(DEVICE_VAR) {
        Err(_) => Ok(()),
        Ok(v) if v.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(v) => Err(usage(format!("{DEVICE_VAR}={v}: only the cpu device is available in this build"))),
    }
}

fn parse_list<T: FromStr<Err = Error>>(s: &str, all: &[T]) -> Result<Vec<T>>
where
    T: Copy,
{
    if s.trim().eq_ignore_ascii_case("all") {
        return Ok(all.to_vec());
    }
    let items: Vec<T> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>())
        .collect::<std::result::Result<_, _>>()?;
    Ok(items)
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<u64>().map_err(|_| usage(format!("bad seed {p:?}"))))
        .collect()
}

fn load_manifest(path: &Path) -> Result<SplitManifest> {
    if !path.is_file() {
        return Err(usage(format!("split manifest {} not found; run `prepare` first", path.display())));
    }
    SplitManifest::load(path).with_context(|| format!("reading {}", path.display()))
}

fn train_config(opts: &TrainOpts) -> Result<TrainConfig> {
    let mut c = match &opts.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(v) = opts.epochs {
        c.max_epochs = v;
    }
    if let Some(v) = opts.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = opts.lr {
        c.initial_lr = v;
    }
    if let Some(v) = opts.image_size {
        c.image_size = v;
    }
    if opts.max_train.is_some() {
        c.max_train_samples = opts.max_train;
    }
    if opts.max_val.is_some() {
        c.max_val_samples = opts.max_val;
    }
    if opts.time_budget.is_some() {
        c.time_budget_secs = opts.time_budget;
    }
    c.validate()?;
    Ok(c)
}

pub fn prepare(a: PrepareArgs) -> Result<Vec<PathBuf>> {
    let layout = DatasetLayout::detect(&a.data_root);
    let index = scan_dataset(&a.data_root, &layout, Split::Train)?;
    let (train, val) = split_train_val(&index, a.val_fraction, a.seed)?;
    let test = match &a.test_root {
        Some(root) => Some(scan_dataset(root, &DatasetLayout::detect(root), Split::Test)?),
        None => None,
    };
    log::info!(
        "{} images: {} train, {} val, {} test",
        index.len(),
        train.len(),
        val.len(),
        test.as_ref().map_or(0, |t| t.len())
    );
    let manifest = SplitManifest::new(&a.data_root, a.seed, a.val_fraction, train, val, test);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    manifest.save(&a.out)?;
    Ok(vec![a.out])
}

pub fn train(a: TrainArgs) -> Result<Vec<PathBuf>> {
    let label: ModelLabel = a.model.parse()?;
    let aug_label: AugLabel = a.aug.parse()?;
    let config = train_config(&a.opts)?;
    let manifest = load_manifest(&a.opts.split)?;
    let spec = ModelSpec::default_for(label);

    if a.overfit_batch {
        let mut index = manifest.index(Split::Train);
        index.records.truncate(OVERFIT_SAMPLES);
        let batch = load_all(&index, (config.image_size, config.image_size))?;
        let oc = OverfitConfig {
            lr: config.initial_lr,
            momentum: config.momentum,
            ..OverfitConfig::default()
        };
        let report = overfit_batch(&spec, &batch, &oc, a.seed)?;
        let path = a.opts.runs.join("overfit").join(format!("{}_{}.json", label.name(), a.seed));
        write_atomic(&path, (serde_json::to_string_pretty(&report)? + "\n").as_bytes())?;
        log::info!("best train dice {:.4} after {} steps", report.best_dice(), report.dice_history.len());
        if !report.reached() {
            anyhow::bail!(
                "{label} did not reach dice {} within {} steps (best {:.4}); see {}",
                oc.target_dice,
                oc.max_steps,
                report.best_dice(),
                path.display()
            );
        }
        return Ok(vec![path]);
    }

    let data = TrainData::from_manifest(&manifest, &config)?;
    let aug = AugConfig::from_label(aug_label);
    let m = execute_run(&a.opts.runs, &spec, &aug, &data, &config, a.seed)?;
    let dir = RunDir::new(&a.opts.runs, label, aug_label, a.seed);
    if m.status != RunStatus::Completed {
        anyhow::bail!(
            "run {} ended as {:?}: {}",
            dir.path().display(),
            m.status,
            m.error.unwrap_or_default()
        );
    }
    Ok(vec![dir.path().to_path_buf()])
}

pub fn grid(a: GridArgs) -> Result<Vec<PathBuf>> {
    let models = parse_list(&a.models, &ModelLabel::ALL)?;
    let augs = parse_list(&a.augs, &AugLabel::ALL)?;
    let seeds = parse_seeds(&a.seeds)?;
    if a.jobs == 0 {
        return Err(usage("--jobs must be at least 1"));
    }
    let config = train_config(&a.opts)?;
    let manifest = load_manifest(&a.opts.split)?;
    let data = TrainData::from_manifest(&manifest, &config)?;
    let results = run_grid(&a.opts.runs, &models, &augs, &seeds, &data, &config, a.jobs)?;
    log::info!("{} grid cells with finished runs", results.len());
    let mut out = Vec::new();
    for &m in &models {
        for &g in &augs {
            for &s in &seeds {
                out.push(RunDir::new(&a.opts.runs, m, g, s).path().to_path_buf());
            }
        }
    }
    Ok(out)
}

fn load_run_model(dir: &RunDir) -> Result<(Model, RunConfigSnapshot)> {
    if !dir.checkpoint().is_file() {
        return Err(usage(format!("no checkpoint at {}", dir.checkpoint().display())));
    }
    let snap = dir
        .read_snapshot()
        .with_context(|| format!("reading {}", dir.config().display()))?;
    let size = snap.train.image_size;
    let model = Model::new(&snap.model.clone().with_input(size, size), 0)?;
    model.load(&dir.checkpoint())?;
    Ok((model, snap))
}

pub fn evaluate(a: EvaluateArgs) -> Result<Vec<PathBuf>> {
    let label: ModelLabel = a.model.parse()?;
    let aug: AugLabel = a.aug.parse()?;
    let split = match a.on.to_ascii_lowercase().as_str() {
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(usage(format!("--on must be val or test, got {other}"))),
    };
    let dir = RunDir::new(&a.runs, label, aug, a.seed);
    let (model, snap) = load_run_model(&dir)?;
    let index = load_manifest(&a.split)?.index(split);
    if index.is_empty() {
        return Err(Error::NoData.into());
    }
    let size = snap.train.image_size;
    let samples = load_all(&index, (size, size))?;
    let m = evaluate_split(&model, &samples, snap.train.eval_batch_size)?;
    let out = dir.path().join(format!("evaluation_{split}.json"));
    let body = serde_json::json!({
        "model": label.name(),
        "aug": aug.name(),
        "seed": a.seed,
        "split": split.to_string(),
        "samples": samples.len(),
        "dice": m.dice,
        "iou": m.iou,
        "FT": m.ft,
    });
    write_atomic(&out, (serde_json::to_string_pretty(&body)? + "\n").as_bytes())?;
    log::info!("{label} {aug} seed {}: dice {:.4} iou {:.4}", a.seed, m.dice, m.iou);
    Ok(vec![out])
}

pub fn report(a: ReportArgs) -> Result<Vec<PathBuf>> {
    let tables = parse_list(&a.tables, &TableKind::ALL)?;
    let overall_models = match &a.overall_models {
        Some(s) => parse_list(s, &ModelLabel::ALL)?,
        None => Vec::new(),
    };
    if !a.runs.is_dir() {
        return Err(usage(format!("runs directory {} does not exist", a.runs.display())));
    }
    let options = ReportOptions {
        tables,
        figures: a.figures,
        overall_models,
        strict: a.strict,
    };
    let bundle = build_report(&a.runs, &a.out, &options)?;
    if !bundle.missing.is_empty() {
        log::warn!("incomplete grid, missing: {}", bundle.missing.join(", "));
    }
    let mut paths: Vec<PathBuf> = bundle.all_paths().into_iter().map(Path::to_path_buf).collect();
    if a.overlays {
        paths.push(overlays(&a)?);
    }
    Ok(paths)
}

fn overlays(a: &ReportArgs) -> Result<PathBuf> {
    let aug: AugLabel = a.overlay_aug.parse()?;
    let manifest = load_manifest(&a.split)?;
    let mut index = manifest.index(Split::Test);
    if index.is_empty() {
        index = manifest.index(Split::Val);
    }
    index.records.truncate(a.overlay_samples.max(1));
    let mut models = Vec::new();
    let mut size = None;
    for r in collect_results(&a.runs)?.iter().filter(|r| r.aug == aug) {
        let dir = RunDir::new(&a.runs, r.model, aug, a.seed);
        if !dir.checkpoint().is_file() {
            continue;
        }
        let (model, snap) = load_run_model(&dir)?;
        match size {
            None => size = Some(snap.train.image_size),
            Some(s) if s != snap.train.image_size => {
                log::warn!("{} trained at {} px, skipped in overlays", r.model, snap.train.image_size);
                continue;
            }
            _ => {}
        }
        models.push(model);
    }
    let size = size.ok_or_else(|| usage(format!("no checkpoints for {aug} seed {}", a.seed)))?;
    let samples = load_all(&index, (size, size))?;
    let refs: Vec<&Model> = models.iter().collect();
    let grid = render_overlays(&refs, &samples, lesionseg_core::models::default_threshold())?;
    let path = a.out.join("figures").join("overlays.png");
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    grid.image.save(&path)?;
    Ok(path)
}

/// Two columns (before, after); image on top, mask below.
pub fn preview_panel(before: &Sample, after: &Sample) -> RgbImage {
    let (h, w) = before.shape();
    let (w, h) = (w as u32, h as u32);
    let mut canvas = RgbImage::new(2 * w, 2 * h);
    let parts = [
        (sample_to_rgb(before), 0, 0),
        (sample_to_rgb(after), w, 0),
        (mask_to_rgb(&before.mask), 0, h),
        (mask_to_rgb(&after.mask), w, h),
    ];
    for (img, x, y) in parts {
        image::imageops::replace(&mut canvas, &img, x as i64, y as i64);
    }
    canvas
}

pub fn preview_aug(a: PreviewArgs) -> Result<Vec<PathBuf>> {
    let label: AugLabel = a.aug.parse()?;
    if a.samples == 0 || a.image_size == 0 {
        return Err(usage("--samples and --image-size must be positive"));
    }
    let samples = match &a.split {
        Some(p) => {
            let mut index = load_manifest(p)?.index(Split::Train);
            index.records.truncate(a.samples);
            load_all(&index, (a.image_size, a.image_size))?
        }
        None => synthetic_samples(a.samples, a.image_size, a.seed),
    };
    let pipeline = build_pipeline(&AugConfig::from_label(label))?;
    let augmented = pipeline.apply(&samples, &mut RngStream::new(a.seed))?;
    std::fs::create_dir_all(&a.out)?;
    let mut paths = Vec::new();
    for (before, after) in samples.iter().zip(&augmented) {
        let path = a.out.join(format!("{}_{}.png", before.id, label.name()));
        preview_panel(before, after).save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn predict(a: PredictArgs) -> Result<Vec<PathBuf>> {
    let label: ModelLabel = a.model.parse()?;
    let spec = ModelSpec::default_for(label).with_input(a.image_size, a.image_size);
    let model = Model::new(&spec, 0)?;
    model
        .load(&a.checkpoint)
        .with_context(|| format!("loading {}", a.checkpoint.display()))?;
    std::fs::create_dir_all(&a.out)?;
    let mut paths = Vec::new();
    for img in &a.images {
        let sample = load_unlabeled(img, (a.image_size, a.image_size))?;
        let mask = model.predict_mask(&sample, a.threshold)?;
        let (h, w) = mask.dim();
        let out = GrayImage::from_fn(w as u32, h as u32, |x, y| image::Luma([mask[[y as usize, x as usize]] * 255]));
        let path = a.out.join(format!("{}_mask.png", sample.id));
        out.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

pub fn registry(a: RegistryArgs) -> Result<Vec<PathBuf>> {
    let reg = ModelRegistry::measure(&ModelLabel::ALL)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    reg.save(&a.out)?;
    Ok(vec![a.out])
}
