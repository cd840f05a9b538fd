//! Augmentation primitives and the four training-time configurations.

mod geometric;
mod hair;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};

pub use geometric::{
    cutmix, cutmix_with, flip, flip_forced, mosaic, mosaic_at, mosaic_center, rotate, rotate_by,
    Axis, CutMixPatch,
};
pub use hair::{hair_augment, hair_augment_n, hair_map, hair_remove, HairParams, HairRemovalParams};

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d1_049b_1331_11eb);
    z ^ (z >> 31)
}

/// Stable across platforms and releases, unlike `DefaultHasher`.
pub fn stable_hash(seed: u64, parts: &[&str]) -> u64 {
    let mut h = fnv1a(FNV_OFFSET, &seed.to_le_bytes());
    for p in parts {
        h = fnv1a(h, p.as_bytes());
        h = fnv1a(h, &[0xff]);
    }
    splitmix(h)
}

/// Seeded random stream; substreams are derived by hashing a key with the seed.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent of how much of the parent stream has been consumed.
    pub fn substream(&self, parts: &[&str]) -> RngStream {
        RngStream::new(stable_hash(self.seed, parts))
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            false
        } else if p >= 1.0 {
            true
        } else {
            self.rng.gen_bool(p)
        }
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AugLabel {
    #[serde(rename = "AUG-1")]
    Aug1,
    #[serde(rename = "AUG-2")]
    Aug2,
    #[serde(rename = "AUG-3")]
    Aug3,
    #[serde(rename = "AUG-4")]
    Aug4,
}

impl AugLabel {
    pub const ALL: [AugLabel; 4] = [AugLabel::Aug1, AugLabel::Aug2, AugLabel::Aug3, AugLabel::Aug4];

    pub fn name(self) -> &'static str {
        match self {
            AugLabel::Aug1 => "AUG-1",
            AugLabel::Aug2 => "AUG-2",
            AugLabel::Aug3 => "AUG-3",
            AugLabel::Aug4 => "AUG-4",
        }
    }
}

impl fmt::Display for AugLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AugLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect();
        match key.to_ascii_uppercase().as_str() {
            "AUG1" | "1" => Ok(AugLabel::Aug1),
            "AUG2" | "2" => Ok(AugLabel::Aug2),
            "AUG3" | "3" => Ok(AugLabel::Aug3),
            "AUG4" | "4" => Ok(AugLabel::Aug4),
            _ => Err(Error::UnknownLabel(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpProbs {
    pub rotate: f64,
    pub cutmix: f64,
    pub mosaic: f64,
    pub hair_aug: f64,
    pub hair_removal: f64,
}

impl Default for OpProbs {
    fn default() -> Self {
        Self {
            rotate: 0.5,
            cutmix: 0.3,
            mosaic: 0.3,
            hair_aug: 0.5,
            hair_removal: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugConfig {
    pub label: AugLabel,
    pub rotation_limit_deg: f64,
    pub flip_prob: f64,
    pub cutmix: bool,
    pub mosaic: bool,
    pub hair_aug: bool,
    pub hair_removal: bool,
    #[serde(default)]
    pub per_op_probs: OpProbs,
    #[serde(default)]
    pub hair: HairParams,
    #[serde(default)]
    pub removal: HairRemovalParams,
}

impl AugConfig {
    pub fn from_label(label: AugLabel) -> Self {
        let (cutmix, mosaic, hair_aug, hair_removal) = match label {
            AugLabel::Aug1 => (false, false, false, false),
            AugLabel::Aug2 => (true, true, false, false),
            AugLabel::Aug3 => (true, true, true, false),
            AugLabel::Aug4 => (true, true, false, true),
        };
        Self {
            label,
            rotation_limit_deg: 180.0,
            flip_prob: 0.5,
            cutmix,
            mosaic,
            hair_aug,
            hair_removal,
            per_op_probs: OpProbs::default(),
            hair: HairParams::default(),
            removal: HairRemovalParams::default(),
        }
    }

    /// Every probabilistic op switched off.
    pub fn without_randomness(mut self) -> Self {
        self.flip_prob = 0.0;
        self.per_op_probs = OpProbs {
            rotate: 0.0,
            cutmix: 0.0,
            mosaic: 0.0,
            hair_aug: 0.0,
            hair_removal: self.per_op_probs.hair_removal,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.hair_aug && self.hair_removal {
            return Err(Error::InvalidConfig(
                "hair_aug and hair_removal are mutually exclusive".into(),
            ));
        }
        if !(self.rotation_limit_deg > 0.0 && self.rotation_limit_deg <= 180.0) {
            return Err(Error::InvalidConfig(format!(
                "rotation_limit_deg {} outside (0, 180]",
                self.rotation_limit_deg
            )));
        }
        let p = &self.per_op_probs;
        for (name, v) in [
            ("flip_prob", self.flip_prob),
            ("rotate", p.rotate),
            ("cutmix", p.cutmix),
            ("mosaic", p.mosaic),
            ("hair_aug", p.hair_aug),
            ("hair_removal", p.hair_removal),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} probability {v} outside [0, 1]")));
            }
        }
        let h = &self.hair;
        if h.min_strokes > h.max_strokes || h.min_thickness > h.max_thickness || h.min_thickness == 0 {
            return Err(Error::InvalidConfig("hair stroke ranges are inverted or empty".into()));
        }
        if self.removal.kernel % 2 == 0 || self.removal.kernel > 255 {
            return Err(Error::InvalidConfig(format!(
                "hair removal kernel {} must be odd and below 256",
                self.removal.kernel
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    HairRemoval,
    HairAug,
    Rotate,
    HFlip,
    VFlip,
    CutMix,
    Mosaic,
}

/// Ordered op list built from an [`AugConfig`]; per-sample ops first, then the
/// batch-level mixes.
#[derive(Clone, Debug)]
pub struct Pipeline {
    config: AugConfig,
    ops: Vec<OpKind>,
}

pub fn build_pipeline(config: &AugConfig) -> Result<Pipeline> {
    config.validate()?;
    let mut ops = Vec::new();
    if config.hair_removal {
        ops.push(OpKind::HairRemoval);
    }
    if config.hair_aug {
        ops.push(OpKind::HairAug);
    }
    ops.extend([OpKind::Rotate, OpKind::HFlip, OpKind::VFlip]);
    if config.cutmix {
        ops.push(OpKind::CutMix);
    }
    if config.mosaic {
        ops.push(OpKind::Mosaic);
    }
    Ok(Pipeline {
        config: config.clone(),
        ops,
    })
}

impl Pipeline {
    pub fn ops(&self) -> &[OpKind] {
        &self.ops
    }

    pub fn config(&self) -> &AugConfig {
        &self.config
    }

    /// Per-sample ops, driven by a stream private to this sample.
    pub fn apply_sample(&self, sample: &Sample, rng: &mut RngStream) -> Sample {
        let c = &self.config;
        let p = &c.per_op_probs;
        let mut s = sample.clone();
        for op in &self.ops {
            s = match op {
                OpKind::HairRemoval if rng.bernoulli(p.hair_removal) => hair_remove(&s, &c.removal),
                OpKind::HairAug if rng.bernoulli(p.hair_aug) => hair_augment(&s, &c.hair, rng),
                OpKind::Rotate if rng.bernoulli(p.rotate) => rotate(&s, c.rotation_limit_deg, rng),
                OpKind::HFlip => flip(&s, Axis::Horizontal, c.flip_prob, rng),
                OpKind::VFlip => flip(&s, Axis::Vertical, c.flip_prob, rng),
                _ => s,
            };
        }
        s
    }

    /// Augments a batch. Each sample gets a substream keyed by its id, so the
    /// result does not depend on batch order for the per-sample ops.
    pub fn apply(&self, batch: &[Sample], rng: &mut RngStream) -> Result<Vec<Sample>> {
        let batch_stream = RngStream::new(rng.next_u64());
        let mut out: Vec<Sample> = batch
            .iter()
            .map(|s| self.apply_sample(s, &mut batch_stream.substream(&["sample", &s.id])))
            .collect();
        let p = &self.config.per_op_probs;
        let mut mix = batch_stream.substream(&["mix"]);
        let n = out.len();
        if n == 0 {
            return Ok(out);
        }
        if self.ops.contains(&OpKind::CutMix) {
            let src = out.clone();
            for (i, s) in out.iter_mut().enumerate() {
                if mix.bernoulli(p.cutmix) {
                    let j = mix.gen_range(0..n);
                    *s = cutmix(&src[i], &src[j], &mut mix)?;
                }
            }
        }
        if self.ops.contains(&OpKind::Mosaic) {
            let src = out.clone();
            for (i, s) in out.iter_mut().enumerate() {
                if mix.bernoulli(p.mosaic) {
                    let mut idx = [i, mix.gen_range(0..n), mix.gen_range(0..n), mix.gen_range(0..n)];
                    rand::seq::SliceRandom::shuffle(&mut idx[..], &mut mix);
                    let mut m = mosaic([&src[idx[0]], &src[idx[1]], &src[idx[2]], &src[idx[3]]], &mut mix)?;
                    m.id = src[i].id.clone();
                    *s = m;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array2, Array3};

    fn batch(n: usize, h: usize, w: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let mut r = RngStream::new(100 + i as u64);
                let mask = Array2::from_shape_fn((h, w), |_| u8::from(r.gen_bool(0.5)));
                Sample {
                    id: format!("s{i}"),
                    image: Array3::from_shape_fn((h, w, 3), |(y, x, _)| mask[[y, x]] as f32),
                    mask,
                }
            })
            .collect()
    }

    #[test]
    fn labels_match_table_rows() {
        let rows = [
            (AugLabel::Aug1, [false, false, false, false]),
            (AugLabel::Aug2, [true, true, false, false]),
            (AugLabel::Aug3, [true, true, true, false]),
            (AugLabel::Aug4, [true, true, false, true]),
        ];
        for (label, flags) in rows {
            let c = AugConfig::from_label(label);
            assert_eq!([c.cutmix, c.mosaic, c.hair_aug, c.hair_removal], flags);
            assert_eq!((c.rotation_limit_deg, c.flip_prob), (180.0, 0.5));
            c.validate().unwrap();
        }
    }

    #[test]
    fn pipeline_op_lists() {
        let ops = |l| build_pipeline(&AugConfig::from_label(l)).unwrap().ops().to_vec();
        assert_eq!(ops(AugLabel::Aug1), vec![OpKind::Rotate, OpKind::HFlip, OpKind::VFlip]);
        assert!(ops(AugLabel::Aug3).contains(&OpKind::HairAug));
        assert!(!ops(AugLabel::Aug3).contains(&OpKind::HairRemoval));
        assert!(ops(AugLabel::Aug4).contains(&OpKind::HairRemoval));
        assert!(!ops(AugLabel::Aug4).contains(&OpKind::HairAug));
        assert_eq!(ops(AugLabel::Aug4)[0], OpKind::HairRemoval);
    }

    #[test]
    fn both_hair_ops_rejected() {
        let mut c = AugConfig::from_label(AugLabel::Aug3);
        c.hair_removal = true;
        assert!(matches!(build_pipeline(&c), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn aug1_without_randomness_is_identity() {
        let p = build_pipeline(&AugConfig::from_label(AugLabel::Aug1).without_randomness()).unwrap();
        let b = batch(4, 16, 16);
        assert_eq!(p.apply(&b, &mut RngStream::new(3)).unwrap(), b);
    }

    #[test]
    fn pipeline_reproducible_and_co_transforming() {
        for label in AugLabel::ALL {
            let p = build_pipeline(&AugConfig::from_label(label)).unwrap();
            let b = batch(6, 20, 20);
            let x = p.apply(&b, &mut RngStream::new(11)).unwrap();
            let y = p.apply(&b, &mut RngStream::new(11)).unwrap();
            assert_eq!(x, y);
            for s in &x {
                s.validate().unwrap();
            }
            if !matches!(label, AugLabel::Aug3 | AugLabel::Aug4) {
                for s in &x {
                    for ((yy, xx), &m) in s.mask.indexed_iter() {
                        assert_eq!(u8::from(s.image[[yy, xx, 0]] > 0.5), m);
                    }
                }
            }
        }
    }

    #[test]
    fn label_parsing() {
        assert_eq!("AUG-3".parse::<AugLabel>().unwrap(), AugLabel::Aug3);
        assert_eq!("aug2".parse::<AugLabel>().unwrap(), AugLabel::Aug2);
        assert!("AUG-5".parse::<AugLabel>().is_err());
        assert_eq!(serde_json::to_string(&AugLabel::Aug1).unwrap(), "\"AUG-1\"");
    }

    #[test]
    fn config_toml_round_trip() {
        let c = AugConfig::from_label(AugLabel::Aug4);
        let s = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<AugConfig>(&s).unwrap(), c);
    }

    #[test]
    fn substreams_are_stable() {
        let a = RngStream::new(7).substream(&["sample", "ISIC_0000000"]);
        let mut consumed = RngStream::new(7);
        consumed.next_u64();
        let b = consumed.substream(&["sample", "ISIC_0000000"]);
        assert_eq!(a.seed(), b.seed());
        assert_ne!(a.seed(), RngStream::new(7).substream(&["sample", "ISIC_0000001"]).seed());
        assert_eq!(stable_hash(0, &[]), splitmix(fnv1a(FNV_OFFSET, &0u64.to_le_bytes())));
    }
}
