//! Attention modules, recurrent-residual and residual blocks, and pyramid
//! inputs shared by the segmentation networks.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_max_pool, sigmoid, upsample_bilinear, BatchNorm2d, Conv2d, ConvBnRelu,
    ConvCfg, Ctx, Dense, ParamPath,
};

pub const CBAM_REDUCTION: usize = 16;
pub const CBAM_KERNEL: usize = 7;
pub const RECURRENCE_STEPS: usize = 2;

/// Bias that saturates a sigmoid to exactly 1.0 in floating point.
const OPEN_BIAS: f64 = 50.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockSpec {
    Cbam { reduction: usize, kernel: usize },
    AttentionGate { inter_channels: Option<usize> },
    CbamGate { reduction: usize, kernel: usize },
    RrBlock { t: usize },
    Residual { bottleneck: usize, stride: usize },
    PyramidInput { levels: usize },
}

impl BlockSpec {
    pub fn cbam() -> Self {
        BlockSpec::Cbam {
            reduction: CBAM_REDUCTION,
            kernel: CBAM_KERNEL,
        }
    }

    pub fn cbam_gate() -> Self {
        BlockSpec::CbamGate {
            reduction: CBAM_REDUCTION,
            kernel: CBAM_KERNEL,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            BlockSpec::Cbam { reduction, kernel } | BlockSpec::CbamGate { reduction, kernel } => {
                if reduction == 0 {
                    return Err(Error::BadReduction {
                        channels: 0,
                        reduction,
                    });
                }
                if kernel % 2 == 0 {
                    return Err(Error::BadKernel(kernel));
                }
                Ok(())
            }
            BlockSpec::Residual { bottleneck, stride } if bottleneck == 0 || stride == 0 => Err(
                Error::InvalidConfig("residual block needs positive width and stride".into()),
            ),
            BlockSpec::PyramidInput { levels: 0 } => {
                Err(Error::InvalidConfig("pyramid needs at least one level".into()))
            }
            _ => Ok(()),
        }
    }
}

/// `x ⊙ σ(MLP(avgpool x) + MLP(maxpool x))` with one MLP shared by both paths.
pub struct ChannelAttention {
    fc1: Dense,
    fc2: Dense,
}

impl ChannelAttention {
    pub fn new(p: &ParamPath, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::BadReduction {
                channels,
                reduction,
            });
        }
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Dense::new(&p.pp("fc1"), channels, hidden)?,
            fc2: Dense::new(&p.pp("fc2"), hidden, channels)?,
        })
    }

    pub fn weights(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let mlp = |v: Tensor| -> Result<Tensor> {
            self.fc2.forward(&self.fc1.forward(&v.reshape((b, c))?, ctx)?.relu()?, ctx)
        };
        let a = (mlp(global_avg_pool(x)?)? + mlp(global_max_pool(x)?)?)?;
        sigmoid(&a.reshape((b, c, 1, 1))?)
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.weights(x, ctx)?)?)
    }

    pub fn force_open(&self) -> Result<()> {
        self.fc1.fill(0.0, 0.0)?;
        self.fc2.fill(0.0, OPEN_BIAS / 2.0)
    }
}

/// `x ⊙ σ(conv_k([mean_c x; max_c x]))`.
pub struct SpatialAttention {
    conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(p: &ParamPath, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::BadKernel(kernel));
        }
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), 2, 1, ConvCfg::k(kernel))?,
        })
    }

    pub fn weights(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let avg = x.mean_keepdim(1)?;
        let max = x.max_keepdim(1)?;
        sigmoid(&self.conv.forward(&Tensor::cat(&[avg, max], 1)?, ctx)?)
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(x.broadcast_mul(&self.weights(x, ctx)?)?)
    }

    pub fn force_open(&self) -> Result<()> {
        self.conv.fill(0.0, OPEN_BIAS)
    }
}

/// Channel attention followed by spatial attention.
pub struct Cbam {
    channel: ChannelAttention,
    spatial: SpatialAttention,
}

impl Cbam {
    pub fn new(p: &ParamPath, channels: usize, reduction: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            channel: ChannelAttention::new(&p.pp("channel"), channels, reduction)?,
            spatial: SpatialAttention::new(&p.pp("spatial"), kernel)?,
        })
    }

    pub fn with_defaults(p: &ParamPath, channels: usize) -> Result<Self> {
        Self::new(p, channels, CBAM_REDUCTION, CBAM_KERNEL)
    }

    pub fn channel(&self) -> &ChannelAttention {
        &self.channel
    }

    pub fn spatial(&self) -> &SpatialAttention {
        &self.spatial
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.spatial.forward(&self.channel.forward(x, ctx)?, ctx)
    }

    pub fn force_open(&self) -> Result<()> {
        self.channel.force_open()?;
        self.spatial.force_open()
    }
}

/// Additive attention gate: `skip ⊙ σ(ψ(ReLU(θ·skip + φ·up(gate))))`.
pub struct AttentionGate {
    theta: Conv2d,
    phi: Conv2d,
    psi: Conv2d,
}

impl AttentionGate {
    pub fn new(p: &ParamPath, skip_channels: usize, gate_channels: usize, inter: usize) -> Result<Self> {
        let inter = inter.max(1);
        Ok(Self {
            theta: Conv2d::new(&p.pp("theta"), skip_channels, inter, ConvCfg::k(1))?,
            phi: Conv2d::new(&p.pp("phi"), gate_channels, inter, ConvCfg::k(1))?,
            psi: Conv2d::new(&p.pp("psi"), inter, 1, ConvCfg::k(1))?,
        })
    }

    /// Coefficients `α ∈ (0, 1)` at the skip resolution, shape `(B, 1, H, W)`.
    pub fn coefficients(&self, skip: &Tensor, gate: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (bs, _, h, w) = skip.dims4()?;
        let (bg, _, hg, wg) = gate.dims4()?;
        if bs != bg || hg > h || wg > w {
            return Err(Error::ShapeIncompatible(format!(
                "skip {:?} vs gate {:?}",
                skip.dims(),
                gate.dims()
            )));
        }
        // Projecting before resampling keeps the interpolation on fewer channels.
        let g = upsample_bilinear(&self.phi.forward(gate, ctx)?, h, w)?;
        let a = (self.theta.forward(skip, ctx)? + g)?.relu()?;
        sigmoid(&self.psi.forward(&a, ctx)?)
    }

    pub fn forward(&self, skip: &Tensor, gate: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(skip.broadcast_mul(&self.coefficients(skip, gate, ctx)?)?)
    }

    pub fn force_open(&self) -> Result<()> {
        self.psi.fill(0.0, OPEN_BIAS)
    }
}

/// CBAM refines the skip features, then the attention gate scales them.
pub struct CbamAttentionGate {
    cbam: Cbam,
    gate: AttentionGate,
}

impl CbamAttentionGate {
    pub fn new(p: &ParamPath, skip_channels: usize, gate_channels: usize, inter: usize) -> Result<Self> {
        Self::with_reduction(p, skip_channels, gate_channels, inter, CBAM_REDUCTION)
    }

    pub fn with_reduction(
        p: &ParamPath,
        skip_channels: usize,
        gate_channels: usize,
        inter: usize,
        reduction: usize,
    ) -> Result<Self> {
        Ok(Self {
            cbam: Cbam::new(&p.pp("cbam"), skip_channels, reduction, CBAM_KERNEL)?,
            gate: AttentionGate::new(&p.pp("gate"), skip_channels, gate_channels, inter)?,
        })
    }

    pub fn cbam(&self) -> &Cbam {
        &self.cbam
    }

    pub fn gate(&self) -> &AttentionGate {
        &self.gate
    }

    pub fn forward(&self, skip: &Tensor, gate: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.gate.forward(&self.cbam.forward(skip, ctx)?, gate, ctx)
    }

    pub fn force_open(&self) -> Result<()> {
        self.cbam.force_open()?;
        self.gate.force_open()
    }
}

/// One shared conv unrolled over `t` extra steps: `h₀ = f(x)`, `hₖ = f(x + hₖ₋₁)`.
pub struct RecurrentConv {
    conv: ConvBnRelu,
    t: usize,
}

impl RecurrentConv {
    pub fn new(p: &ParamPath, channels: usize, t: usize) -> Result<Self> {
        Ok(Self {
            conv: ConvBnRelu::new(&p.pp("conv"), channels, channels, ConvCfg::k(3))?,
            t,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let mut h = self.conv.forward(x, ctx)?;
        for _ in 0..self.t {
            h = self.conv.forward(&(x + &h)?, ctx)?;
        }
        Ok(h)
    }
}

/// `x' + RCL(RCL(x'))` with `x'` a 1×1 projection of the input.
pub struct RecurrentResidualBlock {
    proj: Conv2d,
    rcl1: RecurrentConv,
    rcl2: RecurrentConv,
}

impl RecurrentResidualBlock {
    pub fn new(p: &ParamPath, c_in: usize, filters: usize, t: usize) -> Result<Self> {
        Ok(Self {
            proj: Conv2d::new(&p.pp("proj"), c_in, filters, ConvCfg::k(1))?,
            rcl1: RecurrentConv::new(&p.pp("rcl1"), filters, t)?,
            rcl2: RecurrentConv::new(&p.pp("rcl2"), filters, t)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let x = self.proj.forward(x, ctx)?;
        let y = self.rcl2.forward(&self.rcl1.forward(&x, ctx)?, ctx)?;
        Ok((x + y)?)
    }
}

/// ResNet bottleneck: 1×1 (strided) → 3×3 → 1×1 expanding to `4·width`, with a
/// projected shortcut when the shape changes.
pub struct Bottleneck {
    c1: ConvBnRelu,
    c2: ConvBnRelu,
    c3: Conv2d,
    bn3: BatchNorm2d,
    shortcut: Option<(Conv2d, BatchNorm2d)>,
}

impl Bottleneck {
    pub const EXPANSION: usize = 4;

    pub fn new(p: &ParamPath, c_in: usize, width: usize, stride: usize) -> Result<Self> {
        let c_out = width * Self::EXPANSION;
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(&p.pp("short"), c_in, c_out, ConvCfg::k(1).stride(stride))?,
                BatchNorm2d::new(&p.pp("short_bn"), c_out)?,
            ))
        } else {
            None
        };
        Ok(Self {
            c1: ConvBnRelu::new(&p.pp("c1"), c_in, width, ConvCfg::k(1).stride(stride))?,
            c2: ConvBnRelu::new(&p.pp("c2"), width, width, ConvCfg::k(3))?,
            c3: Conv2d::new(&p.pp("c3"), width, c_out, ConvCfg::k(1))?,
            bn3: BatchNorm2d::new(&p.pp("bn3"), c_out)?,
            shortcut,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.c2.forward(&self.c1.forward(x, ctx)?, ctx)?;
        let y = self.bn3.forward(&self.c3.forward(&y, ctx)?, ctx)?;
        let s = match &self.shortcut {
            Some((conv, bn)) => bn.forward(&conv.forward(x, ctx)?, ctx)?,
            None => x.clone(),
        };
        Ok((y + s)?.relu()?)
    }
}

/// Squeeze-and-excitation channel reweighting.
pub struct SqueezeExcite {
    fc1: Dense,
    fc2: Dense,
}

impl SqueezeExcite {
    pub fn new(p: &ParamPath, channels: usize, ratio: usize) -> Result<Self> {
        let hidden = (channels / ratio.max(1)).max(1);
        Ok(Self {
            fc1: Dense::new(&p.pp("fc1"), channels, hidden)?,
            fc2: Dense::new(&p.pp("fc2"), hidden, channels)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, _, _) = x.dims4()?;
        let s = global_avg_pool(x)?.reshape((b, c))?;
        let s = self.fc2.forward(&self.fc1.forward(&s, ctx)?.relu()?, ctx)?;
        Ok(x.broadcast_mul(&sigmoid(&s)?.reshape((b, c, 1, 1))?)?)
    }
}

/// Level `k` is the input average-pooled by `2^k`, for `k = 1..=levels`.
pub fn pyramid_inputs(image: &Tensor, levels: usize) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = image.dims4()?;
    if h % (1 << levels) != 0 || w % (1 << levels) != 0 {
        return Err(Error::IncompatibleShape(format!(
            "{h}x{w} not divisible by 2^{levels}"
        )));
    }
    let mut out = Vec::with_capacity(levels);
    let mut cur = image.clone();
    for _ in 0..levels {
        cur = cur.avg_pool2d(2)?;
        out.push(cur.clone());
    }
    Ok(out)
}

/// Channel concatenation helper used by decoders.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    Ok(Tensor::cat(parts, 1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn to_vec(t: &Tensor) -> Vec<f64> {
        t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        to_vec(a)
            .iter()
            .zip(to_vec(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// Analytic input gradient of `Σ w ⊙ f(x)` against central differences at
    /// a spread of coordinates.
    fn grad_check(f: &dyn Fn(&Tensor) -> Tensor, shape: &[usize]) {
        let x0 = rand_tensor(shape, 1);
        let probe = f(&x0);
        let w = rand_tensor(probe.dims(), 2);
        let x = Var::from_tensor(&x0).unwrap();
        let loss = (f(x.as_tensor()) * &w).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let analytic = to_vec(grads.get(x.as_tensor()).unwrap());
        let base = to_vec(&x0);
        let eps = 1e-5;
        let scalar = |v: &[f64]| -> f64 {
            let t = Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap();
            (f(&t) * &w).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
        };
        let (mut num_sq, mut err_sq) = (0.0, 0.0);
        for i in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let numeric = (scalar(&p) - scalar(&m)) / (2.0 * eps);
            num_sq += numeric * numeric;
            err_sq += (numeric - analytic[i]).powi(2);
        }
        let rel = err_sq.sqrt() / num_sq.sqrt().max(1e-12);
        assert!(rel < 1e-3, "relative gradient error {rel}");
    }

    const SHAPE: [usize; 4] = [2, 4, 8, 8];

    #[test]
    fn channel_attention_contract() {
        let store = ParamStore::new(1, DType::F64);
        let ca = ChannelAttention::new(&store.root(), 4, 2).unwrap();
        let mut x = to_vec(&rand_tensor(&SHAPE, 3));
        for b in 0..2 {
            for i in 0..64 {
                x[b * 256 + i] = 0.0;
            }
        }
        let x = Tensor::from_vec(x, &SHAPE, &Device::Cpu).unwrap();
        let y = ca.forward(&x, Ctx::EVAL).unwrap();
        assert_eq!(y.dims(), x.dims());
        assert!(to_vec(&y.narrow(1, 0, 1).unwrap()).iter().all(|&v| v == 0.0));
        ca.force_open().unwrap();
        assert_eq!(max_abs_diff(&ca.forward(&x, Ctx::EVAL).unwrap(), &x), 0.0);
        assert!(matches!(
            ChannelAttention::new(&store.root().pp("bad"), 10, 16),
            Err(Error::BadReduction { .. })
        ));
    }

    #[test]
    fn spatial_attention_contract() {
        let store = ParamStore::new(1, DType::F64);
        let sa = SpatialAttention::new(&store.root(), 7).unwrap();
        let x = rand_tensor(&SHAPE, 4);
        let y = sa.forward(&x, Ctx::EVAL).unwrap();
        assert_eq!(y.dims(), x.dims());
        let zero = x.zeros_like().unwrap();
        assert_eq!(max_abs_diff(&sa.forward(&zero, Ctx::EVAL).unwrap(), &zero), 0.0);
        sa.force_open().unwrap();
        assert_eq!(max_abs_diff(&sa.forward(&x, Ctx::EVAL).unwrap(), &x), 0.0);
        assert!(matches!(
            SpatialAttention::new(&store.root().pp("bad"), 4),
            Err(Error::BadKernel(4))
        ));
    }

    #[test]
    fn cbam_is_channel_then_spatial() {
        let store = ParamStore::new(2, DType::F64);
        let cbam = Cbam::new(&store.root(), 4, 2, 7).unwrap();
        let x = rand_tensor(&[1, 4, 5, 6], 5);
        let y = cbam.forward(&x, Ctx::EVAL).unwrap();
        // Oracle: apply the two gates by hand with explicit broadcasting.
        let cw = cbam.channel().weights(&x, Ctx::EVAL).unwrap();
        let xc = x.broadcast_mul(&cw).unwrap();
        let sw = cbam.spatial().weights(&xc, Ctx::EVAL).unwrap();
        let expected = xc.broadcast_mul(&sw).unwrap();
        assert!(max_abs_diff(&y, &expected) < 1e-12);
        cbam.force_open().unwrap();
        assert_eq!(max_abs_diff(&cbam.forward(&x, Ctx::EVAL).unwrap(), &x), 0.0);
    }

    #[test]
    fn attention_gate_contract() {
        let store = ParamStore::new(3, DType::F64);
        let ag = AttentionGate::new(&store.root(), 4, 6, 2).unwrap();
        let skip = rand_tensor(&SHAPE, 6);
        let gate = rand_tensor(&[2, 6, 4, 4], 7);
        let alpha = ag.coefficients(&skip, &gate, Ctx::EVAL).unwrap();
        assert!(to_vec(&alpha).iter().all(|&a| a > 0.0 && a < 1.0));
        let y = ag.forward(&skip, &gate, Ctx::EVAL).unwrap();
        assert_eq!(y.dims(), skip.dims());
        let zero = skip.zeros_like().unwrap();
        assert!(to_vec(&ag.forward(&zero, &gate, Ctx::EVAL).unwrap()).iter().all(|&v| v == 0.0));
        assert!(matches!(
            ag.forward(&skip, &rand_tensor(&[3, 6, 4, 4], 1), Ctx::EVAL),
            Err(Error::ShapeIncompatible(_))
        ));
        ag.force_open().unwrap();
        assert_eq!(max_abs_diff(&ag.forward(&skip, &gate, Ctx::EVAL).unwrap(), &skip), 0.0);
    }

    #[test]
    fn cbam_gate_composition() {
        let store = ParamStore::new(4, DType::F64);
        let cg = CbamAttentionGate::new(&store.root(), 16, 8, 8).unwrap();
        let skip = rand_tensor(&[2, 16, 8, 8], 8);
        let gate = rand_tensor(&[2, 8, 4, 4], 9);
        let y = cg.forward(&skip, &gate, Ctx::EVAL).unwrap();
        let refined = cg.cbam().forward(&skip, Ctx::EVAL).unwrap();
        let expected = cg.gate().forward(&refined, &gate, Ctx::EVAL).unwrap();
        assert!(max_abs_diff(&y, &expected) < 1e-12);
        cg.force_open().unwrap();
        assert_eq!(max_abs_diff(&cg.forward(&skip, &gate, Ctx::EVAL).unwrap(), &skip), 0.0);
    }

    #[test]
    fn recurrent_block_unrolls_and_shares_weights() {
        let counts: Vec<usize> = [0, 1, 2, 3]
            .iter()
            .map(|&t| {
                let s = ParamStore::new(5, DType::F64);
                RecurrentResidualBlock::new(&s.root(), 3, 4, t).unwrap();
                s.num_trainable()
            })
            .collect();
        assert!(counts.windows(2).all(|w| w[0] == w[1]));

        // Hand-unrolled t = 2 with the block's own shared conv layers.
        let s = ParamStore::new(6, DType::F64);
        let p = s.root();
        let block = RecurrentResidualBlock::new(&p, 3, 4, 2).unwrap();
        let x = rand_tensor(&[2, 3, 8, 8], 10);
        let ctx = Ctx::EVAL;
        let proj = block.proj.forward(&x, ctx).unwrap();
        let f1 = |v: &Tensor| block.rcl1.conv.forward(v, ctx).unwrap();
        let f2 = |v: &Tensor| block.rcl2.conv.forward(v, ctx).unwrap();
        let mut h = f1(&proj);
        h = f1(&(&proj + &h).unwrap());
        h = f1(&(&proj + &h).unwrap());
        let r1 = h;
        let mut h = f2(&r1);
        h = f2(&(&r1 + &h).unwrap());
        h = f2(&(&r1 + &h).unwrap());
        let expected = (proj + h).unwrap();
        let y = block.forward(&x, ctx).unwrap();
        assert_eq!(y.dims(), &[2, 4, 8, 8]);
        assert!(max_abs_diff(&y, &expected) < 1e-12);
    }

    #[test]
    fn recurrent_t0_is_plain_residual_pair() {
        let s = ParamStore::new(7, DType::F64);
        let block = RecurrentResidualBlock::new(&s.root(), 4, 4, 0).unwrap();
        let x = rand_tensor(&SHAPE, 11);
        let ctx = Ctx::EVAL;
        let xp = block.proj.forward(&x, ctx).unwrap();
        let y = block.rcl2.conv.forward(&block.rcl1.conv.forward(&xp, ctx).unwrap(), ctx).unwrap();
        let expected = (xp + y).unwrap();
        assert!(max_abs_diff(&block.forward(&x, ctx).unwrap(), &expected) < 1e-12);
    }

    #[test]
    fn pyramid_levels() {
        let img = Tensor::full(0.3f64, (1, 3, 256, 256), &Device::Cpu).unwrap();
        let levels = pyramid_inputs(&img, 3).unwrap();
        let sizes: Vec<_> = levels.iter().map(|l| l.dims()[2]).collect();
        assert_eq!(sizes, vec![128, 64, 32]);
        for l in &levels {
            assert!(to_vec(l).iter().all(|&v| (v - 0.3).abs() < 1e-12));
        }
        let checker: Vec<f64> = (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect();
        let c = Tensor::from_vec(checker, (1, 1, 4, 4), &Device::Cpu).unwrap();
        assert!(to_vec(&pyramid_inputs(&c, 1).unwrap()[0]).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn bottleneck_shapes() {
        let s = ParamStore::new(8, DType::F64);
        let b = Bottleneck::new(&s.root(), 8, 4, 2).unwrap();
        let y = b.forward(&rand_tensor(&[2, 8, 8, 8], 12), Ctx::EVAL).unwrap();
        assert_eq!(y.dims(), &[2, 16, 4, 4]);
    }

    #[test]
    fn block_spec_validation() {
        BlockSpec::cbam().validate().unwrap();
        assert!(BlockSpec::Cbam { reduction: 16, kernel: 6 }.validate().is_err());
        assert!(BlockSpec::PyramidInput { levels: 0 }.validate().is_err());
        let json = serde_json::to_string(&BlockSpec::RrBlock { t: 2 }).unwrap();
        assert_eq!(json, r#"{"kind":"rr_block","t":2}"#);
    }

    #[test]
    fn gradients_channel_attention() {
        let s = ParamStore::new(10, DType::F64);
        let b = ChannelAttention::new(&s.root(), 4, 4).unwrap();
        grad_check(&|x| b.forward(x, Ctx::TRAIN).unwrap(), &SHAPE);
    }

    #[test]
    fn gradients_spatial_attention() {
        let s = ParamStore::new(11, DType::F64);
        let b = SpatialAttention::new(&s.root(), 7).unwrap();
        grad_check(&|x| b.forward(x, Ctx::TRAIN).unwrap(), &SHAPE);
    }

    #[test]
    fn gradients_cbam() {
        let s = ParamStore::new(12, DType::F64);
        let b = Cbam::new(&s.root(), 4, 4, 7).unwrap();
        grad_check(&|x| b.forward(x, Ctx::TRAIN).unwrap(), &SHAPE);
    }

    #[test]
    fn gradients_attention_gate() {
        let s = ParamStore::new(13, DType::F64);
        let b = AttentionGate::new(&s.root(), 4, 4, 2).unwrap();
        let gate = rand_tensor(&[2, 4, 4, 4], 20);
        grad_check(&|x| b.forward(x, &gate, Ctx::TRAIN).unwrap(), &SHAPE);
        let skip = rand_tensor(&SHAPE, 21);
        grad_check(&|g| b.forward(&skip, g, Ctx::TRAIN).unwrap(), &[2, 4, 4, 4]);
    }

    #[test]
    fn gradients_recurrent_block() {
        let s = ParamStore::new(14, DType::F64);
        let b = RecurrentResidualBlock::new(&s.root(), 4, 4, 2).unwrap();
        grad_check(&|x| b.forward(x, Ctx::TRAIN).unwrap(), &SHAPE);
    }

    #[test]
    fn gradients_bottleneck() {
        let s = ParamStore::new(15, DType::F64);
        let b = Bottleneck::new(&s.root(), 4, 2, 2).unwrap();
        grad_check(&|x| b.forward(x, Ctx::TRAIN).unwrap(), &SHAPE);
    }

    #[test]
    fn gradients_pyramid() {
        grad_check(
            &|x| {
                let lv = pyramid_inputs(x, 2).unwrap();
                Tensor::cat(&[lv[0].flatten_all().unwrap(), lv[1].flatten_all().unwrap()], 0).unwrap()
            },
            &SHAPE,
        );
    }
}
