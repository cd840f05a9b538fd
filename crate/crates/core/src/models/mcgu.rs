//! Multi-level context gating U-Net: densely connected bottleneck, SE on the
//! upsampled features and a bidirectional ConvLSTM fusing skip and decoder
//! paths.

use candle_core::Tensor;

use super::unet::ConvPair;
use super::Network;
use crate::blocks::SqueezeExcite;
use crate::error::Result;
use crate::nn::{max_pool2, sigmoid, BatchNorm2d, Conv2d, ConvCfg, Ctx, ParamPath, UpConv2x2};

const LEVELS: usize = 3;
const SE_RATIO: usize = 8;

struct ConvLstmCell {
    gates: Conv2d,
    hidden: usize,
}

impl ConvLstmCell {
    fn new(p: &ParamPath, c_in: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            gates: Conv2d::new(&p.pp("gates"), c_in + hidden, 4 * hidden, ConvCfg::k(3))?,
            hidden,
        })
    }

    /// Runs the cell over `seq` from zero state and returns the last hidden state.
    fn run(&self, seq: &[&Tensor], ctx: Ctx) -> Result<Tensor> {
        let (b, _, h, w) = seq[0].dims4()?;
        let n = self.hidden;
        let mut hs = Tensor::zeros((b, n, h, w), seq[0].dtype(), seq[0].device())?;
        let mut cs = hs.clone();
        for x in seq {
            let z = self.gates.forward(&Tensor::cat(&[*x, &hs], 1)?, ctx)?;
            let i = sigmoid(&z.narrow(1, 0, n)?)?;
            let f = sigmoid(&z.narrow(1, n, n)?)?;
            let g = z.narrow(1, 2 * n, n)?.tanh()?;
            let o = sigmoid(&z.narrow(1, 3 * n, n)?)?;
            cs = ((f * &cs)? + (i * g)?)?;
            hs = (o * cs.tanh()?)?;
        }
        Ok(hs)
    }
}

struct DecoderStage {
    up: UpConv2x2,
    bn: BatchNorm2d,
    se: SqueezeExcite,
    fwd: ConvLstmCell,
    bwd: ConvLstmCell,
    conv: ConvPair,
}

impl DecoderStage {
    fn new(p: &ParamPath, c_in: usize, c: usize) -> Result<Self> {
        let hidden = (c / 2).max(1);
        Ok(Self {
            up: UpConv2x2::new(&p.pp("up"), c_in, c)?,
            bn: BatchNorm2d::new(&p.pp("bn"), c)?,
            se: SqueezeExcite::new(&p.pp("se"), c, SE_RATIO)?,
            fwd: ConvLstmCell::new(&p.pp("lstm_f"), c, hidden)?,
            bwd: ConvLstmCell::new(&p.pp("lstm_b"), c, hidden)?,
            conv: ConvPair::new(&p.pp("conv"), 2 * hidden, c)?,
        })
    }

    fn forward(&self, x: &Tensor, skip: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let up = self.bn.forward(&self.up.forward(x, ctx)?, ctx)?.relu()?;
        let up = self.se.forward(&up, ctx)?;
        let f = self.fwd.run(&[skip, &up], ctx)?;
        let b = self.bwd.run(&[&up, skip], ctx)?;
        self.conv.forward(&Tensor::cat(&[&f, &b], 1)?, ctx)
    }
}

pub struct McgUNet {
    enc: Vec<ConvPair>,
    dense: Vec<ConvPair>,
    dec: Vec<DecoderStage>,
    head: Conv2d,
}

impl McgUNet {
    pub fn new(p: &ParamPath, base: usize) -> Result<Self> {
        let ch: Vec<usize> = (0..LEVELS).map(|i| base << i).collect();
        let mut enc = Vec::new();
        let mut c = 3;
        for (i, &f) in ch.iter().enumerate() {
            enc.push(ConvPair::new(&p.pp(format!("enc{i}")), c, f)?);
            c = f;
        }
        let d = base << LEVELS;
        let dense = vec![
            ConvPair::new(&p.pp("dense0"), c, d)?,
            ConvPair::new(&p.pp("dense1"), d, d)?,
            ConvPair::new(&p.pp("dense2"), 2 * d, d)?,
        ];
        let mut dec = Vec::new();
        let mut c = d;
        for i in (0..LEVELS).rev() {
            dec.push(DecoderStage::new(&p.pp(format!("dec{i}")), c, ch[i])?);
            c = ch[i];
        }
        Ok(Self {
            enc,
            dense,
            dec,
            head: Conv2d::new(&p.pp("head"), c, 1, ConvCfg::k(1))?,
        })
    }
}

impl Network for McgUNet {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let mut h = x.clone();
        let mut skips = Vec::new();
        for e in &self.enc {
            h = e.forward(&h, ctx)?;
            skips.push(h.clone());
            h = max_pool2(&h)?;
        }
        let d1 = self.dense[0].forward(&h, ctx)?;
        let d2 = self.dense[1].forward(&d1, ctx)?;
        let mut h = self.dense[2].forward(&Tensor::cat(&[&d1, &d2], 1)?, ctx)?;
        for (stage, skip) in self.dec.iter().zip(skips.iter().rev()) {
            h = stage.forward(&h, skip, ctx)?;
        }
        sigmoid(&self.head.forward(&h, ctx)?)
    }

    fn divisor(&self) -> usize {
        1 << LEVELS
    }
}
