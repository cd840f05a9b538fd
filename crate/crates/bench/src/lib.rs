//! Shared fixtures for the benchmarks under `benches/`.

use lesionseg_core::dataset::{synthetic_samples, Sample};
use lesionseg_core::RngStream;
use rand::Rng;

pub fn batch(n: usize, size: usize) -> Vec<Sample> {
    synthetic_samples(n, size, 7)
}

/// A binary target and a soft prediction of `n` pixels.
pub fn mask_pair(n: usize) -> (Vec<f32>, Vec<f32>) {
    let mut rng = RngStream::new(11);
    let y = (0..n).map(|_| f32::from(u8::from(rng.gen_bool(0.3)))).collect();
    let p = (0..n).map(|_| rng.gen_range(0.0f32..=1.0)).collect();
    (y, p)
}
