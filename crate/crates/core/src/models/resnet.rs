//! U-Net decoder on a ResNet-50 encoder cut after its third stage.

use candle_core::Tensor;

use super::unet::ConvPair;
use super::Network;
use crate::blocks::Bottleneck;
use crate::error::Result;
use crate::nn::{max_pool3_s2, sigmoid, Conv2d, ConvBnRelu, ConvCfg, Ctx, ParamPath, UpConv2x2};

/// Blocks per stage and bottleneck widths of the three stages used.
const STAGES: [(usize, usize, usize); 3] = [(3, 64, 1), (4, 128, 2), (6, 256, 2)];
/// Decoder widths from the bridge upward, each matched with one skip.
const DECODER: [usize; 4] = [512, 256, 128, 64];

/// Parameter-name prefix of the encoder, for loading backbone weights.
pub const ENCODER_PREFIX: &str = "encoder.";

pub struct UResNet50 {
    stem: ConvBnRelu,
    stages: Vec<Vec<Bottleneck>>,
    up: Vec<UpConv2x2>,
    dec: Vec<ConvPair>,
    head: Conv2d,
}

impl UResNet50 {
    pub fn new(p: &ParamPath) -> Result<Self> {
        let e = p.pp("encoder");
        let stem = ConvBnRelu::new(&e.pp("stem"), 3, 64, ConvCfg::k(7).stride(2))?;
        let mut c_in = 64;
        let mut stages = Vec::new();
        for (s, &(blocks, width, stride)) in STAGES.iter().enumerate() {
            let mut stage = Vec::new();
            for b in 0..blocks {
                let st = if b == 0 { stride } else { 1 };
                stage.push(Bottleneck::new(&e.pp(format!("stage{s}.{b}")), c_in, width, st)?);
                c_in = width * Bottleneck::EXPANSION;
            }
            stages.push(stage);
        }
        // Skip widths at /8, /4, /2 and full resolution.
        let skips = [512, 256, 64, 3];
        let mut up = Vec::new();
        let mut dec = Vec::new();
        for (k, &f) in DECODER.iter().enumerate() {
            up.push(UpConv2x2::new(&p.pp(format!("up{k}")), c_in, f)?);
            dec.push(ConvPair::new(&p.pp(format!("dec{k}")), f + skips[k], f)?);
            c_in = f;
        }
        Ok(Self {
            stem,
            stages,
            up,
            dec,
            head: Conv2d::new(&p.pp("head"), c_in, 1, ConvCfg::k(1))?,
        })
    }
}

impl Network for UResNet50 {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let s2 = self.stem.forward(x, ctx)?;
        let mut h = max_pool3_s2(&s2)?;
        let mut feats = Vec::new();
        for stage in &self.stages {
            for block in stage {
                h = block.forward(&h, ctx)?;
            }
            feats.push(h.clone());
        }
        let skips = [&feats[1], &feats[0], &s2, x];
        for k in 0..DECODER.len() {
            let u = self.up[k].forward(&h, ctx)?;
            h = self.dec[k].forward(&Tensor::cat(&[&u, skips[k]], 1)?, ctx)?;
        }
        sigmoid(&self.head.forward(&h, ctx)?)
    }

    fn divisor(&self) -> usize {
        16
    }
}
