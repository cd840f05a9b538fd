//! Synthetic hair strokes and black-hat based hair removal.

use image::{GrayImage, Luma};
use imageproc::morphology::{grayscale_close, Mask};
use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RngStream;
use crate::dataset::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HairParams {
    pub min_strokes: usize,
    pub max_strokes: usize,
    pub min_thickness: usize,
    pub max_thickness: usize,
    /// Stroke gray level range, in `[0, 1]` units.
    pub min_gray: f32,
    pub max_gray: f32,
    /// Upper bound on stroke arc length as a fraction of the shorter side.
    pub max_length_frac: f64,
}

impl Default for HairParams {
    fn default() -> Self {
        Self {
            min_strokes: 4,
            max_strokes: 12,
            min_thickness: 1,
            max_thickness: 3,
            min_gray: 10.0 / 255.0,
            max_gray: 40.0 / 255.0,
            max_length_frac: 0.6,
        }
    }
}

impl HairParams {
    pub fn max_stroke_length(&self, h: usize, w: usize) -> f64 {
        self.max_length_frac * h.min(w) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HairRemovalParams {
    /// Side of the cross-shaped structuring element.
    pub kernel: usize,
    /// Black-hat response above which a pixel counts as hair, in 0..=255 units.
    pub threshold: u8,
}

impl Default for HairRemovalParams {
    fn default() -> Self {
        Self {
            kernel: 17,
            threshold: 10,
        }
    }
}

fn cubic(p: [(f64, f64); 4], t: f64) -> (f64, f64) {
    let u = 1.0 - t;
    let (a, b, c, d) = (u * u * u, 3.0 * u * u * t, 3.0 * u * t * t, t * t * t);
    (
        a * p[0].0 + b * p[1].0 + c * p[2].0 + d * p[3].0,
        a * p[0].1 + b * p[1].1 + c * p[2].1 + d * p[3].1,
    )
}

/// Centerline pixels of one stroke, with the dominant direction of the step that
/// reached each pixel (`true` for mostly horizontal).
fn stroke_centerline(ctrl: [(f64, f64); 4], max_len: f64) -> Vec<(i64, i64, bool)> {
    let chord = ((ctrl[3].0 - ctrl[0].0).powi(2) + (ctrl[3].1 - ctrl[0].1).powi(2)).sqrt();
    let steps = (4.0 * chord) as usize + 16;
    let mut pts = vec![cubic(ctrl, 0.0)];
    let mut len = 0.0;
    for i in 1..=steps {
        let p = cubic(ctrl, i as f64 / steps as f64);
        let last = *pts.last().unwrap();
        let d = ((p.0 - last.0).powi(2) + (p.1 - last.1).powi(2)).sqrt();
        if len + d > max_len {
            break;
        }
        len += d;
        pts.push(p);
    }

    let mut out: Vec<(i64, i64, bool)> = Vec::new();
    let mut cur = (pts[0].0.round() as i64, pts[0].1.round() as i64);
    out.push((cur.0, cur.1, true));
    for p in &pts[1..] {
        let target = (p.0.round() as i64, p.1.round() as i64);
        let (dx, dy) = (target.0 - cur.0, target.1 - cur.1);
        let n = dx.abs().max(dy.abs());
        let horizontal = dx.abs() >= dy.abs();
        // Walk without revisiting the segment's first pixel.
        for k in 1..=n {
            let x = cur.0 + (dx as f64 * k as f64 / n as f64).round() as i64;
            let y = cur.1 + (dy as f64 * k as f64 / n as f64).round() as i64;
            out.push((x, y, horizontal));
        }
        cur = target;
    }
    out
}

/// Draws `n` strokes onto the image; the mask is copied unchanged.
pub fn hair_augment_n(sample: &Sample, n: usize, params: &HairParams, rng: &mut RngStream) -> Sample {
    let mut out = sample.clone();
    let (h, w) = sample.shape();
    let max_len = params.max_stroke_length(h, w);
    for _ in 0..n {
        let thickness = rng.gen_range(params.min_thickness..=params.max_thickness.max(params.min_thickness));
        let gray = rng.gen_range(params.min_gray..=params.max_gray.max(params.min_gray));
        let start = (rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let chord = rng.gen_range(0.3..=1.0) * max_len;
        let end = (start.0 + chord * angle.cos(), start.1 + chord * angle.sin());
        let normal = (-angle.sin(), angle.cos());
        let bend = |rng: &mut RngStream, t: f64| {
            let off = rng.gen_range(-0.3..=0.3) * chord;
            (
                start.0 + (end.0 - start.0) * t + normal.0 * off,
                start.1 + (end.1 - start.1) * t + normal.1 * off,
            )
        };
        let c1 = bend(rng, 1.0 / 3.0);
        let c2 = bend(rng, 2.0 / 3.0);
        // Thickness spreads across, so the arc is shortened to keep each stroke
        // within `max_len * thickness` pixels.
        let line = stroke_centerline([start, c1, c2, end], (max_len - 1.0).max(0.0));
        let lo = -((thickness as i64 - 1) / 2);
        let hi = lo + thickness as i64;
        for (x, y, horizontal) in line {
            for o in lo..hi {
                let (px, py) = if horizontal { (x, y + o) } else { (x + o, y) };
                if (0..w as i64).contains(&px) && (0..h as i64).contains(&py) {
                    for c in 0..3 {
                        out.image[[py as usize, px as usize, c]] = gray;
                    }
                }
            }
        }
    }
    out
}

/// Stroke count drawn from `[min_strokes, max_strokes]`.
pub fn hair_augment(sample: &Sample, params: &HairParams, rng: &mut RngStream) -> Sample {
    let n = rng.gen_range(params.min_strokes..=params.max_strokes.max(params.min_strokes));
    hair_augment_n(sample, n, params, rng)
}

fn to_gray(sample: &Sample) -> GrayImage {
    let (h, w) = sample.shape();
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let v = 0.299 * sample.image[[y, x, 0]] + 0.587 * sample.image[[y, x, 1]] + 0.114 * sample.image[[y, x, 2]];
        Luma([(v * 255.0).round().clamp(0.0, 255.0) as u8])
    })
}

fn cross(kernel: usize) -> Mask {
    let k = kernel.clamp(1, 255) as u32;
    let c = k / 2;
    let img = GrayImage::from_fn(k, k, |x, y| Luma([if x == c || y == c { 255 } else { 0 }]));
    Mask::from_image(&img, c as u8, c as u8)
}

/// Pixels whose black-hat response exceeds the threshold.
pub fn hair_map(sample: &Sample, params: &HairRemovalParams) -> Array2<bool> {
    let gray = to_gray(sample);
    let closed = grayscale_close(&gray, &cross(params.kernel));
    let (h, w) = sample.shape();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let g = gray.get_pixel(x as u32, y as u32)[0];
        let c = closed.get_pixel(x as u32, y as u32)[0];
        c.saturating_sub(g) > params.threshold
    })
}

/// Fills flagged pixels from the ring of known neighbors, peeling inward.
fn inpaint(sample: &mut Sample, mut unknown: Array2<bool>) {
    let (h, w) = sample.shape();
    loop {
        let mut fills = Vec::new();
        for ((y, x), &u) in unknown.indexed_iter() {
            if !u {
                continue;
            }
            let mut acc = [0f32; 3];
            let mut n = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if (dy, dx) == (0, 0) || ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !unknown[[ny, nx]] {
                        for (c, a) in acc.iter_mut().enumerate() {
                            *a += sample.image[[ny, nx, c]];
                        }
                        n += 1;
                    }
                }
            }
            if n > 0 {
                fills.push((y, x, acc.map(|a| a / n as f32)));
            }
        }
        if fills.is_empty() {
            break;
        }
        for (y, x, v) in fills {
            for c in 0..3 {
                sample.image[[y, x, c]] = v[c];
            }
            unknown[[y, x]] = false;
        }
    }
}

/// Grayscale, black-hat with a cross element, threshold, inpaint. Mask untouched.
pub fn hair_remove(sample: &Sample, params: &HairRemovalParams) -> Sample {
    let flagged = hair_map(sample, params);
    let mut out = sample.clone();
    if flagged.iter().any(|&f| f) {
        inpaint(&mut out, flagged);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn flat(h: usize, w: usize, v: f32) -> Sample {
        Sample {
            id: "flat".into(),
            image: Array3::from_elem((h, w, 3), v),
            mask: Array2::from_shape_fn((h, w), |(y, x)| u8::from(x > y)),
        }
    }

    fn changed(a: &Sample, b: &Sample, tol: f32) -> usize {
        let (h, w) = a.shape();
        (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| (0..3).any(|c| (a.image[[y, x, c]] - b.image[[y, x, c]]).abs() > tol))
            .count()
    }

    #[test]
    fn zero_strokes_identity() {
        let s = flat(32, 32, 0.8);
        assert_eq!(hair_augment_n(&s, 0, &HairParams::default(), &mut RngStream::new(1)), s);
    }

    #[test]
    fn stroke_pixel_count_bounded() {
        let p = HairParams::default();
        let s = flat(96, 128, 1.0);
        for seed in 0..50 {
            let out = hair_augment_n(&s, 5, &p, &mut RngStream::new(seed));
            let n = changed(&s, &out, 0.0);
            let bound = 5.0 * p.max_stroke_length(96, 128) * 3.0;
            assert!(n > 0 && (n as f64) <= bound, "{n} vs {bound}");
            assert_eq!(out.mask, s.mask);
        }
    }

    #[test]
    fn strokes_are_dark() {
        let s = flat(64, 64, 1.0);
        let out = hair_augment(&s, &HairParams::default(), &mut RngStream::new(3));
        assert!(out
            .image
            .iter()
            .all(|&v| v == 1.0 || (10.0 / 255.0 - 1e-6..=40.0 / 255.0 + 1e-6).contains(&v)));
    }

    #[test]
    fn removal_leaves_smooth_gradient() {
        let (h, w) = (64, 80);
        let s = Sample {
            id: "g".into(),
            image: Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                0.2 + 0.6 * (x as f32 / w as f32) * 0.7 + 0.1 * (y as f32 / h as f32) + 0.02 * c as f32
            }),
            mask: Array2::zeros((h, w)),
        };
        let out = hair_remove(&s, &HairRemovalParams::default());
        assert!((changed(&s, &out, 0.0) as f64) < 0.01 * (h * w) as f64);
    }

    #[test]
    fn removal_restores_synthetic_hair() {
        let base = flat(96, 96, 0.7);
        let params = HairParams::default();
        for seed in 0..5 {
            let hairy = hair_augment(&base, &params, &mut RngStream::new(seed));
            let cleaned = hair_remove(&hairy, &HairRemovalParams::default());
            assert_eq!(cleaned.mask, base.mask);
            let stroke: Vec<(usize, usize)> = hairy
                .mask
                .indexed_iter()
                .map(|(p, _)| p)
                .filter(|&(y, x)| (hairy.image[[y, x, 0]] - 0.7).abs() > 1e-6)
                .collect();
            let restored = stroke
                .iter()
                .filter(|&&(y, x)| (0..3).all(|c| (cleaned.image[[y, x, c]] - 0.7).abs() <= 10.0 / 255.0))
                .count();
            assert!(restored as f64 >= 0.8 * stroke.len() as f64, "{restored}/{}", stroke.len());
        }
    }
}
