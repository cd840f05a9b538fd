use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::models::{Model, ModelLabel};
use crate::train::{write_atomic, ExperimentResult};

const WIDTH: u32 = 720;
const HEIGHT: u32 = 420;
const MARGIN: f32 = 40.0;
const LEGEND: f32 = 110.0;

/// Line colors, indexed by position in `ModelLabel::ALL`.
pub const PALETTE: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn model_color(m: ModelLabel) -> [u8; 3] {
    let k = ModelLabel::ALL.iter().position(|&x| x == m).expect("known label");
    PALETTE[k]
}

/// Mean gap per epoch for each model, averaged over its runs.
pub fn delta_curves(results: &[ExperimentResult], metric: Metric) -> BTreeMap<ModelLabel, Vec<(usize, f64)>> {
    let mut acc: BTreeMap<ModelLabel, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in results {
        for h in &r.histories {
            for (e, d) in h.delta_series(metric) {
                let slot = acc.entry(r.model).or_default().entry(e).or_insert((0.0, 0));
                slot.0 += d;
                slot.1 += 1;
            }
        }
    }
    acc.into_iter()
        .map(|(m, by_epoch)| (m, by_epoch.into_iter().map(|(e, (s, n))| (e, s / n as f64)).collect()))
        .collect()
}

/// Every per-run, per-epoch gap as CSV rows.
pub fn delta_series_csv(results: &[ExperimentResult]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["model", "aug", "seed", "metric", "epoch", "train", "val", "delta"])?;
    for r in results {
        for h in &r.histories {
            for m in Metric::ALL {
                for rec in &h.records {
                    w.write_record([
                        r.model.name().to_string(),
                        r.aug.name().to_string(),
                        h.seed.to_string(),
                        m.name().to_string(),
                        rec.epoch.to_string(),
                        rec.train(m).to_string(),
                        rec.val(m).to_string(),
                        rec.delta(m).to_string(),
                    ])?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Line chart of per-model mean gap against epoch. Axes start at zero; the
/// legend is a column of color swatches in `ModelLabel::ALL` order.
pub fn render_delta_plot(curves: &BTreeMap<ModelLabel, Vec<(usize, f64)>>) -> Result<RgbImage> {
    if curves.values().all(|c| c.is_empty()) {
        return Err(Error::NoData);
    }
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let max_epoch = curves.values().flatten().map(|p| p.0).max().unwrap_or(1).max(2);
    let max_delta = curves.values().flatten().map(|p| p.1).fold(0.0f64, f64::max);
    let y_top = if max_delta > 0.0 { max_delta * 1.1 } else { 1.0 };
    let (x0, x1) = (MARGIN, WIDTH as f32 - MARGIN - LEGEND);
    let (y0, y1) = (HEIGHT as f32 - MARGIN, MARGIN);
    let px = |e: usize| x0 + (e - 1) as f32 / (max_epoch - 1) as f32 * (x1 - x0);
    let py = |d: f64| y0 - (d / y_top) as f32 * (y0 - y1);

    let grid = Rgb([225, 225, 225]);
    for k in 1..=4 {
        let y = y0 - k as f32 / 4.0 * (y0 - y1);
        draw_line_segment_mut(&mut img, (x0, y), (x1, y), grid);
    }
    let axis = Rgb([0, 0, 0]);
    draw_line_segment_mut(&mut img, (x0, y0), (x1, y0), axis);
    draw_line_segment_mut(&mut img, (x0, y0), (x0, y1), axis);
    for e in (5..=max_epoch).step_by(5) {
        draw_line_segment_mut(&mut img, (px(e), y0), (px(e), y0 + 4.0), axis);
    }

    for (i, (m, pts)) in curves.iter().enumerate() {
        let c = Rgb(model_color(*m));
        for w in pts.windows(2) {
            let (a, b) = ((px(w[0].0), py(w[0].1)), (px(w[1].0), py(w[1].1)));
            draw_line_segment_mut(&mut img, a, b, c);
            draw_line_segment_mut(&mut img, (a.0, a.1 + 1.0), (b.0, b.1 + 1.0), c);
        }
        if let [only] = pts.as_slice() {
            draw_filled_rect_mut(&mut img, Rect::at(px(only.0) as i32 - 2, py(only.1) as i32 - 2).of_size(5, 5), c);
        }
        let ly = MARGIN as i32 + 16 * i as i32;
        draw_filled_rect_mut(&mut img, Rect::at((x1 + 20.0) as i32, ly).of_size(24, 10), c);
    }
    Ok(img)
}

/// Writes one PNG per metric plus the underlying CSV series.
pub fn plot_delta_curves(results: &[ExperimentResult], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if results.iter().all(|r| r.histories.is_empty()) {
        return Err(Error::NoData);
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for m in Metric::ALL {
        let img = render_delta_plot(&delta_curves(results, m))?;
        let path = out_dir.join(format!("delta_{}.png", m.name().to_ascii_lowercase()));
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
        write_atomic(&path, &bytes)?;
        paths.push(path);
    }
    let csv = out_dir.join("delta_series.csv");
    write_atomic(&csv, delta_series_csv(results)?.as_bytes())?;
    paths.push(csv);
    Ok(paths)
}

pub fn sample_to_rgb(s: &Sample) -> RgbImage {
    let (h, w) = s.shape();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = |c| (s.image[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([v(0), v(1), v(2)])
    })
}

pub fn mask_to_rgb(mask: &ndarray::Array2<u8>) -> RgbImage {
    let (h, w) = mask.dim();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = if mask[[y as usize, x as usize]] > 0 { 255 } else { 0 };
        Rgb([v, v, v])
    })
}

/// Rows are samples; columns are input, ground truth, then one predicted mask
/// per model. Panels are tiled edge to edge.
pub struct OverlayGrid {
    pub rows: usize,
    pub cols: usize,
    pub panel: (u32, u32),
    pub image: RgbImage,
}

impl OverlayGrid {
    pub fn panel_image(&self, row: usize, col: usize) -> RgbImage {
        let (w, h) = self.panel;
        image::imageops::crop_imm(&self.image, col as u32 * w, row as u32 * h, w, h).to_image()
    }
}

pub fn render_overlays(models: &[&Model], samples: &[Sample], threshold: f32) -> Result<OverlayGrid> {
    let first = samples.first().ok_or(Error::NoData)?;
    let (h, w) = first.shape();
    let cols = 2 + models.len();
    let mut image = RgbImage::new((cols * w) as u32, (samples.len() * h) as u32);
    for (r, s) in samples.iter().enumerate() {
        if s.shape() != (h, w) {
            return Err(Error::ShapeMismatch(format!("{} is {:?}, grid is {:?}", s.id, s.shape(), (h, w))));
        }
        let mut panels = vec![sample_to_rgb(s), mask_to_rgb(&s.mask)];
        for m in models {
            panels.push(mask_to_rgb(&m.predict_mask(s, threshold)?));
        }
        for (c, p) in panels.iter().enumerate() {
            image::imageops::replace(&mut image, p, (c * w) as i64, (r * h) as i64);
        }
    }
    Ok(OverlayGrid {
        rows: samples.len(),
        cols,
        panel: (w as u32, h as u32),
        image,
    })
}
