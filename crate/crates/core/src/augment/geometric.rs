//! Spatial transforms that move image and mask pixels together.

use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::RngStream;
use crate::dataset::Sample;
use crate::error::{Error, Result};

/// Reflect-101 index: `-1 -> 1`, `n -> n - 2`.
fn reflect101(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

/// Bilinear resampling of one plane under an inverse coordinate map.
fn resample_plane<F>(h: usize, w: usize, src: F, inv: &dyn Fn(f64, f64) -> (f64, f64)) -> Array2<f32>
where
    F: Fn(usize, usize) -> f32,
{
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (sx, sy) = inv(x as f64, y as f64);
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = (sx - x0) as f32;
        let fy = (sy - y0) as f32;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let xa = reflect101(x0, w);
        let xb = reflect101(x0 + 1, w);
        let ya = reflect101(y0, h);
        let yb = reflect101(y0 + 1, h);
        let top = src(ya, xa) * (1.0 - fx) + src(ya, xb) * fx;
        let bot = src(yb, xa) * (1.0 - fx) + src(yb, xb) * fx;
        top * (1.0 - fy) + bot * fy
    })
}

/// Rotates by `theta_deg` about the frame center. The mask is interpolated like
/// the image and re-binarized at 0.5, so a channel equal to the mask stays equal
/// after thresholding.
pub fn rotate_by(sample: &Sample, theta_deg: f64) -> Sample {
    let (h, w) = sample.shape();
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let t = theta_deg.to_radians();
    let (s, c) = t.sin_cos();
    let inv = move |x: f64, y: f64| {
        let dx = x - cx;
        let dy = y - cy;
        (cx + c * dx + s * dy, cy - s * dx + c * dy)
    };
    let mut image = Array3::<f32>::zeros((h, w, 3));
    for ch in 0..3 {
        let plane = resample_plane(h, w, |y, x| sample.image[[y, x, ch]], &inv);
        for ((y, x), v) in plane.indexed_iter() {
            image[[y, x, ch]] = v.clamp(0.0, 1.0);
        }
    }
    let mask = resample_plane(h, w, |y, x| sample.mask[[y, x]] as f32, &inv)
        .mapv(|v| u8::from(v > 0.5));
    Sample {
        id: sample.id.clone(),
        image,
        mask,
    }
}

/// Rotation by θ drawn uniformly from `[-limit_deg, limit_deg]`.
pub fn rotate(sample: &Sample, limit_deg: f64, rng: &mut RngStream) -> Sample {
    let limit = limit_deg.clamp(0.0, 180.0);
    let theta = if limit > 0.0 {
        rng.gen_range(-limit..=limit)
    } else {
        0.0
    };
    rotate_by(sample, theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Horizontal,
    Vertical,
}

/// Unconditional mirror: horizontal maps column `j` to `W-1-j`.
pub fn flip_forced(sample: &Sample, axis: Axis) -> Sample {
    let (h, w) = sample.shape();
    let src = |y: usize, x: usize| match axis {
        Axis::Horizontal => (y, w - 1 - x),
        Axis::Vertical => (h - 1 - y, x),
    };
    Sample {
        id: sample.id.clone(),
        image: Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
            let (sy, sx) = src(y, x);
            sample.image[[sy, sx, c]]
        }),
        mask: Array2::from_shape_fn((h, w), |(y, x)| {
            let (sy, sx) = src(y, x);
            sample.mask[[sy, sx]]
        }),
    }
}

pub fn flip(sample: &Sample, axis: Axis, prob: f64, rng: &mut RngStream) -> Sample {
    if rng.bernoulli(prob) {
        flip_forced(sample, axis)
    } else {
        sample.clone()
    }
}

fn check_same_shape(a: &Sample, b: &Sample) -> Result<()> {
    if a.shape() != b.shape() || a.image.dim() != b.image.dim() {
        return Err(Error::ShapeMismatch(format!(
            "{} {:?} vs {} {:?}",
            a.id,
            a.image.dim(),
            b.id,
            b.image.dim()
        )));
    }
    Ok(())
}

/// Patch geometry for one CutMix: `size` is `(h, w)`, offsets are `(y, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CutMixPatch {
    pub size: (usize, usize),
    pub src: (usize, usize),
    pub dst: (usize, usize),
}

impl CutMixPatch {
    /// Area ratio in `[0.1, 0.5]`, aspect in `[0.5, 2]`, independent offsets.
    pub fn sample(h: usize, w: usize, rng: &mut RngStream) -> Self {
        let area = rng.gen_range(0.1..=0.5) * (h * w) as f64;
        let aspect: f64 = rng.gen_range(0.5..=2.0);
        let ph = ((area * aspect).sqrt().round() as usize).clamp(1, h);
        let pw = ((area / aspect).sqrt().round() as usize).clamp(1, w);
        let src = (rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw));
        let dst = (rng.gen_range(0..=h - ph), rng.gen_range(0..=w - pw));
        Self {
            size: (ph, pw),
            src,
            dst,
        }
    }

    pub fn contains_dst(&self, y: usize, x: usize) -> bool {
        (self.dst.0..self.dst.0 + self.size.0).contains(&y)
            && (self.dst.1..self.dst.1 + self.size.1).contains(&x)
    }
}

/// Pastes the patch of `b` at `patch.src` onto `a` at `patch.dst`, image and mask alike.
pub fn cutmix_with(a: &Sample, b: &Sample, patch: &CutMixPatch) -> Result<Sample> {
    check_same_shape(a, b)?;
    let (h, w) = a.shape();
    let (ph, pw) = patch.size;
    if patch.src.0 + ph > h || patch.src.1 + pw > w || patch.dst.0 + ph > h || patch.dst.1 + pw > w {
        return Err(Error::ShapeMismatch(format!("patch {patch:?} exceeds {h}x{w}")));
    }
    let mut out = a.clone();
    for dy in 0..ph {
        for dx in 0..pw {
            let (sy, sx) = (patch.src.0 + dy, patch.src.1 + dx);
            let (ty, tx) = (patch.dst.0 + dy, patch.dst.1 + dx);
            for c in 0..3 {
                out.image[[ty, tx, c]] = b.image[[sy, sx, c]];
            }
            out.mask[[ty, tx]] = b.mask[[sy, sx]];
        }
    }
    Ok(out)
}

pub fn cutmix(a: &Sample, b: &Sample, rng: &mut RngStream) -> Result<Sample> {
    check_same_shape(a, b)?;
    let (h, w) = a.shape();
    let patch = CutMixPatch::sample(h, w, rng);
    cutmix_with(a, b, &patch)
}

/// Quadrant `k` (TL, TR, BL, BR) around `center = (cy, cx)` comes from `quad[k]`
/// at the same pixel positions.
pub fn mosaic_at(quad: [&Sample; 4], center: (usize, usize)) -> Result<Sample> {
    for s in &quad[1..] {
        check_same_shape(quad[0], s)?;
    }
    let (h, w) = quad[0].shape();
    let (cy, cx) = (center.0.min(h), center.1.min(w));
    let pick = |y: usize, x: usize| usize::from(y >= cy) * 2 + usize::from(x >= cx);
    Ok(Sample {
        id: quad[0].id.clone(),
        image: Array3::from_shape_fn((h, w, 3), |(y, x, c)| quad[pick(y, x)].image[[y, x, c]]),
        mask: Array2::from_shape_fn((h, w), |(y, x)| quad[pick(y, x)].mask[[y, x]]),
    })
}

/// Center drawn uniformly from the central half of the frame on each axis.
pub fn mosaic_center(h: usize, w: usize, rng: &mut RngStream) -> (usize, usize) {
    (
        rng.gen_range(h / 4..=(3 * h / 4).max(h / 4)),
        rng.gen_range(w / 4..=(3 * w / 4).max(w / 4)),
    )
}

pub fn mosaic(quad: [&Sample; 4], rng: &mut RngStream) -> Result<Sample> {
    let (h, w) = quad[0].shape();
    let center = mosaic_center(h, w, rng);
    mosaic_at(quad, center)
}
