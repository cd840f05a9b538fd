//! The ten segmentation networks, their default sizing, and a common
//! [`Model`] wrapper for inference, checkpointing and parameter accounting.

mod double_unet;
mod label;
mod mcgu;
mod r2u;
mod resnet;
mod unet;

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, CBAM_REDUCTION, RECURRENCE_STEPS};
use crate::dataset::{Sample, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::metrics::MASK_THRESHOLD;
use crate::nn::{Ctx, ParamStore};

pub use double_unet::DoubleUNet;
pub use label::ModelLabel;
pub use mcgu::McgUNet;
pub use r2u::R2UNet;
pub use resnet::{UResNet50, ENCODER_PREFIX};
pub use unet::{SkipAttention, UNet};

/// A network mapping `(B, 3, H, W)` images to `(B, 1, H, W)` probabilities.
pub trait Network: Send + Sync {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor>;

    /// Saturates every attention gate to 1. Returns whether there were any.
    fn force_attention_open(&self) -> Result<bool> {
        Ok(false)
    }

    /// Input height and width must be multiples of this.
    fn divisor(&self) -> usize;
}

/// Largest reduction ratio up to the CBAM default that divides `channels`.
pub fn cbam_reduction(channels: usize) -> usize {
    (1..=CBAM_REDUCTION.min(channels.max(1)))
        .rev()
        .find(|r| channels % r == 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub label: ModelLabel,
    /// `(height, width, channels)`.
    pub input_shape: (usize, usize, usize),
    pub base_filters: usize,
    /// Resolution levels including the bottleneck.
    pub depth: usize,
    pub recurrence_t: usize,
    pub blocks: Vec<BlockSpec>,
    /// Safetensors file with encoder weights; only used by UR50.
    #[serde(default)]
    pub backbone_weights: Option<PathBuf>,
}

impl ModelSpec {
    /// Frozen defaults sized against the reference parameter counts.
    pub fn default_for(label: ModelLabel) -> Self {
        use ModelLabel::*;
        let (base, depth) = match label {
            Unet | Uc => (32, 5),
            Uag => (20, 4),
            Ucg => (22, 4),
            Upcg => (22, 5),
            R2u => (100, 5),
            R2uc => (52, 5),
            Ur50 => (64, 5),
            Du => (64, 5),
            Mcgu => (17, 4),
        };
        let blocks = match label {
            Uc => vec![BlockSpec::cbam()],
            Uag => vec![BlockSpec::AttentionGate {
                inter_channels: None,
            }],
            Ucg => vec![BlockSpec::cbam_gate()],
            Upcg => vec![
                BlockSpec::cbam_gate(),
                BlockSpec::PyramidInput { levels: depth - 1 },
            ],
            R2u => vec![BlockSpec::RrBlock {
                t: RECURRENCE_STEPS,
            }],
            R2uc => vec![
                BlockSpec::RrBlock {
                    t: RECURRENCE_STEPS,
                },
                BlockSpec::cbam(),
            ],
            Ur50 => vec![BlockSpec::Residual {
                bottleneck: 64,
                stride: 2,
            }],
            Unet | Du | Mcgu => Vec::new(),
        };
        Self {
            label,
            input_shape: (IMAGE_SIZE, IMAGE_SIZE, 3),
            base_filters: base,
            depth,
            recurrence_t: RECURRENCE_STEPS,
            blocks,
            backbone_weights: None,
        }
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.input_shape = (h, w, 3);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_filters == 0 || self.depth < 2 {
            return Err(Error::InvalidConfig(format!(
                "{}: base_filters {} / depth {} too small",
                self.label, self.base_filters, self.depth
            )));
        }
        for b in &self.blocks {
            b.validate()?;
        }
        Ok(())
    }

    pub fn pretrained(&self) -> bool {
        self.label == ModelLabel::Ur50 && self.backbone_weights.is_some()
    }
}

fn build_network(spec: &ModelSpec, store: &ParamStore) -> Result<Box<dyn Network>> {
    use ModelLabel::*;
    let p = store.root();
    let (b, d, t) = (spec.base_filters, spec.depth, spec.recurrence_t);
    Ok(match spec.label {
        Unet => Box::new(UNet::new(&p, b, d, SkipAttention::None, false)?),
        Uc => Box::new(UNet::new(&p, b, d, SkipAttention::Cbam, false)?),
        Uag => Box::new(UNet::new(&p, b, d, SkipAttention::Gate, false)?),
        Ucg => Box::new(UNet::new(&p, b, d, SkipAttention::CbamGate, false)?),
        Upcg => Box::new(UNet::new(&p, b, d, SkipAttention::CbamGate, true)?),
        R2u => Box::new(R2UNet::new(&p, b, d, t, false)?),
        R2uc => Box::new(R2UNet::new(&p, b, d, t, true)?),
        Ur50 => Box::new(UResNet50::new(&p)?),
        Du => Box::new(DoubleUNet::new(&p)?),
        Mcgu => Box::new(McgUNet::new(&p, b)?),
    })
}

/// A built network together with its parameters.
pub struct Model {
    spec: ModelSpec,
    store: ParamStore,
    net: Box<dyn Network>,
}

impl Model {
    pub fn new(spec: &ModelSpec, seed: u64) -> Result<Self> {
        Self::with_dtype(spec, seed, DType::F32)
    }

    pub fn with_dtype(spec: &ModelSpec, seed: u64, dtype: DType) -> Result<Self> {
        spec.validate()?;
        let store = ParamStore::new(seed, dtype);
        let net = build_network(spec, &store)?;
        let (h, w, c) = spec.input_shape;
        if c != 3 || h % net.divisor() != 0 || w % net.divisor() != 0 {
            return Err(Error::IncompatibleShape(format!(
                "{}: input {:?} needs 3 channels and sides divisible by {}",
                spec.label,
                spec.input_shape,
                net.divisor()
            )));
        }
        if let Some(path) = spec.backbone_weights.as_deref().filter(|_| spec.label == ModelLabel::Ur50) {
            let n = store.load_matching(path, ENCODER_PREFIX)?;
            log::info!("loaded {n} backbone tensors from {}", path.display());
        }
        Ok(Self {
            spec: spec.clone(),
            store,
            net,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn label(&self) -> ModelLabel {
        self.spec.label
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn count_parameters(&self) -> usize {
        self.store.num_trainable()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let d = self.net.divisor();
        if c != 3 || h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::IncompatibleShape(format!(
                "{}: input {:?} needs 3 channels and sides divisible by {d}",
                self.spec.label,
                x.dims()
            )));
        }
        Ok(())
    }

    /// `(B, 3, H, W)` → `(B, 1, H, W)` probabilities.
    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.check_input(x)?;
        self.net.forward(&x.to_dtype(self.dtype())?, ctx)
    }

    /// `(B, H, W, 3)` → `(B, H, W, 1)` probabilities.
    pub fn forward_nhwc(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.forward(&x.permute((0, 3, 1, 2))?.contiguous()?, ctx)?;
        Ok(y.permute((0, 2, 3, 1))?.contiguous()?)
    }

    pub fn force_attention_open(&self) -> Result<bool> {
        self.net.force_attention_open()
    }

    /// Probability maps in evaluation mode, `batch` samples at a time.
    pub fn predict_probs(&self, samples: &[Sample], batch: usize) -> Result<Vec<Array2<f32>>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(batch.max(1)) {
            let x = samples_to_tensor(chunk, self.dtype())?;
            let y = self.forward(&x, Ctx::EVAL)?;
            let (b, _, h, w) = y.dims4()?;
            let flat: Vec<f32> = y.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for i in 0..b {
                let plane = flat[i * h * w..(i + 1) * h * w].to_vec();
                out.push(Array2::from_shape_vec((h, w), plane).expect("plane size"));
            }
        }
        Ok(out)
    }

    pub fn predict_mask(&self, sample: &Sample, threshold: f32) -> Result<Array2<u8>> {
        let probs = self.predict_probs(std::slice::from_ref(sample), 1)?;
        Ok(threshold_mask(&probs[0], threshold))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    pub fn load(&self, path: &Path) -> Result<()> {
        self.store.load(path)
    }
}

pub fn build_model(spec: &ModelSpec) -> Result<Model> {
    Model::new(spec, 0)
}

/// Pixels at or above `threshold` become 1.
pub fn threshold_mask(probs: &Array2<f32>, threshold: f32) -> Array2<u8> {
    probs.mapv(|p| u8::from(p >= threshold))
}

pub fn default_threshold() -> f32 {
    MASK_THRESHOLD
}

/// Stacks samples into a `(B, 3, H, W)` tensor.
pub fn samples_to_tensor(samples: &[Sample], dtype: DType) -> Result<Tensor> {
    let (h, w) = samples
        .first()
        .map(|s| s.shape())
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let mut data = Vec::with_capacity(samples.len() * 3 * h * w);
    for s in samples {
        if s.shape() != (h, w) {
            return Err(Error::ShapeMismatch(format!("{} is {:?}, batch is {:?}", s.id, s.shape(), (h, w))));
        }
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(s.image[[y, x, c]]);
                }
            }
        }
    }
    Ok(Tensor::from_vec(data, (samples.len(), 3, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks masks into a `(B, 1, H, W)` tensor of zeros and ones.
pub fn masks_to_tensor(samples: &[Sample], dtype: DType) -> Result<Tensor> {
    let (h, w) = samples
        .first()
        .map(|s| s.shape())
        .ok_or_else(|| Error::InvalidConfig("empty batch".into()))?;
    let data: Vec<f32> = samples.iter().flat_map(|s| s.mask.iter().map(|&v| v as f32)).collect();
    Ok(Tensor::from_vec(data, (samples.len(), 1, h, w), &Device::Cpu)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub label: ModelLabel,
    pub description: String,
    pub spec: ModelSpec,
    pub parameters: usize,
    pub reference_params_m: f64,
    pub relative_deviation: f64,
    pub pretrained_backbone: bool,
}

/// Frozen hyperparameters and measured sizes of every model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub entries: Vec<RegistryEntry>,
}

impl ModelRegistry {
    /// Builds each default model once to count its parameters.
    pub fn measure(labels: &[ModelLabel]) -> Result<Self> {
        let entries = labels
            .iter()
            .map(|&label| {
                let spec = ModelSpec::default_for(label);
                let parameters = Model::new(&spec, 0)?.count_parameters();
                let reference = label.reference_params_m() * 1e6;
                Ok(RegistryEntry {
                    label,
                    description: label.description().to_string(),
                    pretrained_backbone: spec.pretrained(),
                    spec,
                    parameters,
                    reference_params_m: label.reference_params_m(),
                    relative_deviation: (parameters as f64 - reference) / reference,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn small(label: ModelLabel) -> ModelSpec {
        ModelSpec::default_for(label).with_input(32, 32)
    }

    #[test]
    fn reduction_choice() {
        assert_eq!(cbam_reduction(32), 16);
        assert_eq!(cbam_reduction(24), 12);
        assert_eq!(cbam_reduction(20), 10);
        assert_eq!(cbam_reduction(7), 7);
    }

    #[test]
    fn small_models_output_probabilities() {
        for label in [ModelLabel::Unet, ModelLabel::Uag, ModelLabel::Ucg, ModelLabel::Upcg, ModelLabel::Mcgu] {
            let m = Model::new(&small(label), 1).unwrap();
            let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
            let y = m.forward(&x, Ctx::EVAL).unwrap();
            assert_eq!(y.dims(), &[1, 1, 32, 32], "{label}");
            let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|&p| p > 0.0 && p < 1.0), "{label}");
        }
    }

    #[test]
    fn rejects_bad_input_shape() {
        let spec = small(ModelLabel::Unet).with_input(30, 32);
        assert!(matches!(Model::new(&spec, 0), Err(Error::IncompatibleShape(_))));
        let m = Model::new(&small(ModelLabel::Unet), 0).unwrap();
        let x = Tensor::zeros((1, 3, 24, 40), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&x, Ctx::EVAL), Err(Error::IncompatibleShape(_))));
    }

    #[test]
    fn recurrence_does_not_change_size() {
        let count = |t| {
            let mut s = ModelSpec::default_for(ModelLabel::R2u);
            s.base_filters = 8;
            s.recurrence_t = t;
            Model::new(&s, 0).unwrap().count_parameters()
        };
        assert_eq!(count(1), count(3));
    }

    #[test]
    fn threshold_oracle() {
        let probs = Array2::from_shape_fn((5, 7), |(y, x)| ((y * 7 + x) as f32 * 0.37).fract());
        let mask = threshold_mask(&probs, 0.5);
        for ((y, x), &m) in mask.indexed_iter() {
            assert_eq!(m == 1, probs[[y, x]] >= 0.5);
        }
        assert!(threshold_mask(&probs, 0.0).iter().all(|&m| m == 1));
    }

    #[test]
    fn predict_mask_extremes() {
        let m = Model::new(&small(ModelLabel::Unet), 0).unwrap();
        let sample = Sample {
            id: "z".into(),
            image: Array3::zeros((32, 32, 3)),
            mask: Array2::zeros((32, 32)),
        };
        assert!(m.predict_mask(&sample, 0.0).unwrap().iter().all(|&v| v == 1));
        // Strongly negative head bias drives every logit below zero.
        let bias = m.store().get("head.bias").unwrap();
        bias.set(&bias.ones_like().unwrap().affine(-1e3, 0.0).unwrap()).unwrap();
        assert!(m.predict_mask(&sample, 0.5).unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = Model::new(&small(ModelLabel::Uag), 1).unwrap();
        let b = Model::new(&small(ModelLabel::Uag), 2).unwrap();
        let path = dir.path().join("UAG_AUG-1_1.ckpt");
        a.save(&path).unwrap();
        b.load(&path).unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 32, 32), &Device::Cpu).unwrap();
        let ya: Vec<f32> = a.forward(&x, Ctx::EVAL).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let yb: Vec<f32> = b.forward(&x, Ctx::EVAL).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(ya, yb);
    }
}
