//! Plain U-Net and its attention and pyramid-input variants.

use candle_core::Tensor;

use super::{cbam_reduction, Network};
use crate::blocks::{pyramid_inputs, AttentionGate, Cbam, CbamAttentionGate, CBAM_KERNEL};
use crate::error::Result;
use crate::nn::{max_pool2, sigmoid, Conv2d, ConvBnRelu, ConvCfg, Ctx, ParamPath, UpConv2x2};

/// Two 3×3 conv-BN-ReLU layers.
pub(crate) struct ConvPair {
    a: ConvBnRelu,
    b: ConvBnRelu,
}

impl ConvPair {
    pub(crate) fn new(p: &ParamPath, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBnRelu::new(&p.pp("a"), c_in, c_out, ConvCfg::k(3))?,
            b: ConvBnRelu::new(&p.pp("b"), c_out, c_out, ConvCfg::k(3))?,
        })
    }

    pub(crate) fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        self.b.forward(&self.a.forward(x, ctx)?, ctx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipAttention {
    None,
    Cbam,
    Gate,
    CbamGate,
}

enum SkipModule {
    Plain,
    Cbam(Cbam),
    Gate(AttentionGate),
    CbamGate(CbamAttentionGate),
}

impl SkipModule {
    fn new(p: &ParamPath, kind: SkipAttention, c_skip: usize, c_gate: usize) -> Result<Self> {
        let inter = (c_skip / 2).max(1);
        Ok(match kind {
            SkipAttention::None => SkipModule::Plain,
            SkipAttention::Cbam => {
                SkipModule::Cbam(Cbam::new(p, c_skip, cbam_reduction(c_skip), CBAM_KERNEL)?)
            }
            SkipAttention::Gate => SkipModule::Gate(AttentionGate::new(p, c_skip, c_gate, inter)?),
            SkipAttention::CbamGate => SkipModule::CbamGate(CbamAttentionGate::with_reduction(
                p,
                c_skip,
                c_gate,
                inter,
                cbam_reduction(c_skip),
            )?),
        })
    }

    fn forward(&self, skip: &Tensor, gate: &Tensor, ctx: Ctx) -> Result<Tensor> {
        match self {
            SkipModule::Plain => Ok(skip.clone()),
            SkipModule::Cbam(m) => m.forward(skip, ctx),
            SkipModule::Gate(m) => m.forward(skip, gate, ctx),
            SkipModule::CbamGate(m) => m.forward(skip, gate, ctx),
        }
    }

    fn force_open(&self) -> Result<bool> {
        match self {
            SkipModule::Plain => return Ok(false),
            SkipModule::Cbam(m) => m.force_open()?,
            SkipModule::Gate(m) => m.force_open()?,
            SkipModule::CbamGate(m) => m.force_open()?,
        }
        Ok(true)
    }
}

/// Encoder/decoder with transposed-conv upsampling. `depth` counts resolution
/// levels including the bottleneck.
pub struct UNet {
    enc: Vec<ConvPair>,
    pyramid: Vec<ConvBnRelu>,
    up: Vec<UpConv2x2>,
    skip: Vec<SkipModule>,
    dec: Vec<ConvPair>,
    head: Conv2d,
    depth: usize,
}

impl UNet {
    pub fn new(
        p: &ParamPath,
        base: usize,
        depth: usize,
        attention: SkipAttention,
        pyramid: bool,
    ) -> Result<Self> {
        let ch: Vec<usize> = (0..depth).map(|i| base << i).collect();
        let mut enc = Vec::new();
        let mut pyr = Vec::new();
        for i in 0..depth {
            let c_in = if i == 0 { 3 } else { ch[i - 1] };
            let c_in = if pyramid && i > 0 {
                pyr.push(ConvBnRelu::new(&p.pp(format!("pyr{i}")), 3, ch[i - 1], ConvCfg::k(3))?);
                c_in + ch[i - 1]
            } else {
                c_in
            };
            enc.push(ConvPair::new(&p.pp(format!("enc{i}")), c_in, ch[i])?);
        }
        let mut up = Vec::new();
        let mut skip = Vec::new();
        let mut dec = Vec::new();
        for i in 0..depth - 1 {
            up.push(UpConv2x2::new(&p.pp(format!("up{i}")), ch[i + 1], ch[i])?);
            skip.push(SkipModule::new(&p.pp(format!("att{i}")), attention, ch[i], ch[i + 1])?);
            dec.push(ConvPair::new(&p.pp(format!("dec{i}")), 2 * ch[i], ch[i])?);
        }
        Ok(Self {
            enc,
            pyramid: pyr,
            up,
            skip,
            dec,
            head: Conv2d::new(&p.pp("head"), ch[0], 1, ConvCfg::k(1))?,
            depth,
        })
    }
}

impl Network for UNet {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let pyr = if self.pyramid.is_empty() {
            Vec::new()
        } else {
            pyramid_inputs(x, self.depth - 1)?
        };
        let mut skips = Vec::with_capacity(self.depth - 1);
        let mut h = x.clone();
        for i in 0..self.depth {
            if i > 0 {
                h = max_pool2(&h)?;
                if let Some(conv) = self.pyramid.get(i - 1) {
                    h = Tensor::cat(&[&h, &conv.forward(&pyr[i - 1], ctx)?], 1)?;
                }
            }
            h = self.enc[i].forward(&h, ctx)?;
            if i + 1 < self.depth {
                skips.push(h.clone());
            }
        }
        for i in (0..self.depth - 1).rev() {
            let up = self.up[i].forward(&h, ctx)?;
            let s = self.skip[i].forward(&skips[i], &h, ctx)?;
            h = self.dec[i].forward(&Tensor::cat(&[&up, &s], 1)?, ctx)?;
        }
        sigmoid(&self.head.forward(&h, ctx)?)
    }

    fn force_attention_open(&self) -> Result<bool> {
        let mut any = false;
        for s in &self.skip {
            any |= s.force_open()?;
        }
        Ok(any)
    }

    fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}
