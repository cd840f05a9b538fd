//! Recurrent residual U-Net, optionally with CBAM on the skip connections.

use candle_core::Tensor;

use super::{cbam_reduction, Network};
use crate::blocks::{Cbam, RecurrentResidualBlock, CBAM_KERNEL};
use crate::error::Result;
use crate::nn::{max_pool2, sigmoid, upsample_bilinear, Conv2d, ConvBnRelu, ConvCfg, Ctx, ParamPath};

pub struct R2UNet {
    enc: Vec<RecurrentResidualBlock>,
    up: Vec<ConvBnRelu>,
    cbam: Vec<Option<Cbam>>,
    dec: Vec<RecurrentResidualBlock>,
    head: Conv2d,
    depth: usize,
}

impl R2UNet {
    pub fn new(p: &ParamPath, base: usize, depth: usize, t: usize, with_cbam: bool) -> Result<Self> {
        let ch: Vec<usize> = (0..depth).map(|i| base << i).collect();
        let mut enc = Vec::new();
        for i in 0..depth {
            let c_in = if i == 0 { 3 } else { ch[i - 1] };
            enc.push(RecurrentResidualBlock::new(&p.pp(format!("enc{i}")), c_in, ch[i], t)?);
        }
        let mut up = Vec::new();
        let mut cbam = Vec::new();
        let mut dec = Vec::new();
        for i in 0..depth - 1 {
            up.push(ConvBnRelu::new(&p.pp(format!("up{i}")), ch[i + 1], ch[i], ConvCfg::k(3))?);
            cbam.push(if with_cbam {
                Some(Cbam::new(
                    &p.pp(format!("att{i}")),
                    ch[i],
                    cbam_reduction(ch[i]),
                    CBAM_KERNEL,
                )?)
            } else {
                None
            });
            dec.push(RecurrentResidualBlock::new(&p.pp(format!("dec{i}")), 2 * ch[i], ch[i], t)?);
        }
        Ok(Self {
            enc,
            up,
            cbam,
            dec,
            head: Conv2d::new(&p.pp("head"), ch[0], 1, ConvCfg::k(1))?,
            depth,
        })
    }
}

impl Network for R2UNet {
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let mut skips = Vec::with_capacity(self.depth - 1);
        let mut h = x.clone();
        for i in 0..self.depth {
            if i > 0 {
                h = max_pool2(&h)?;
            }
            h = self.enc[i].forward(&h, ctx)?;
            if i + 1 < self.depth {
                skips.push(h.clone());
            }
        }
        for i in (0..self.depth - 1).rev() {
            let (_, _, hh, ww) = h.dims4()?;
            let up = self.up[i].forward(&upsample_bilinear(&h, 2 * hh, 2 * ww)?, ctx)?;
            let s = match &self.cbam[i] {
                Some(c) => c.forward(&skips[i], ctx)?,
                None => skips[i].clone(),
            };
            h = self.dec[i].forward(&Tensor::cat(&[&s, &up], 1)?, ctx)?;
        }
        sigmoid(&self.head.forward(&h, ctx)?)
    }

    fn force_attention_open(&self) -> Result<bool> {
        let mut any = false;
        for c in self.cbam.iter().flatten() {
            c.force_open()?;
            any = true;
        }
        Ok(any)
    }

    fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}
