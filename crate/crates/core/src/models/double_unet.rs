//! Two stacked U-Nets: a VGG-19 encoder network whose mask gates the input of
//! a second, lighter network. Both use ASPP at the bridge and SE-weighted
//! decoder blocks.

use candle_core::Tensor;

use super::Network;
use crate::blocks::SqueezeExcite;
use crate::error::Result;
use crate::nn::{
    global_avg_pool, max_pool2, sigmoid, upsample_bilinear, Conv2d, ConvBnRelu, ConvCfg, Ctx,
    ParamPath,
};

const VGG19: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)];
const DECODER: [usize; 4] = [256, 128, 64, 32];
const ENCODER2: [usize; 4] = [32, 64, 128, 256];
const ASPP_FILTERS: usize = 64;
const SE_RATIO: usize = 8;

/// Two conv-BN-ReLU layers followed by squeeze-and-excitation.
struct ConvBlock {
    a: ConvBnRelu,
    b: ConvBnRelu,
    se: SqueezeExcite,
}

impl ConvBlock {
    fn new(p: &ParamPath, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            a: ConvBnRelu::new(&p.pp("a"), c_in, c_out, ConvCfg::k(3))?,
            b: ConvBnRelu::new(&p.pp("b"), c_out, c_out, ConvCfg::k(3))?,
            se: SqueezeExcite::new(&p.pp("se"), c_out, SE_RATIO)?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let y = self.b.forward(&self.a.forward(x, ctx)?, ctx)?;
        self.se.forward(&y, ctx)
    }
}

/// Atrous spatial pyramid pooling: image pooling, 1×1, and three dilated 3×3
/// branches, fused by a 1×1 conv.
struct Aspp {
    pool: ConvBnRelu,
    one: ConvBnRelu,
    dilated: Vec<ConvBnRelu>,
    fuse: ConvBnRelu,
}

impl Aspp {
    fn new(p: &ParamPath, c_in: usize, f: usize) -> Result<Self> {
        let dilated = [6, 12, 18]
            .iter()
            .map(|&d| ConvBnRelu::new(&p.pp(format!("d{d}")), c_in, f, ConvCfg::k(3).dilation(d)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            pool: ConvBnRelu::new(&p.pp("pool"), c_in, f, ConvCfg::k(1))?,
            one: ConvBnRelu::new(&p.pp("one"), c_in, f, ConvCfg::k(1))?,
            dilated,
            fuse: ConvBnRelu::new(&p.pp("fuse"), 5 * f, f, ConvCfg::k(1))?,
        })
    }

    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let mut parts = vec![upsample_bilinear(&self.pool.forward(&global_avg_pool(x)?, ctx)?, h, w)?];
        parts.push(self.one.forward(x, ctx)?);
        for d in &self.dilated {
            parts.push(d.forward(x, ctx)?);
        }
        self.fuse.forward(&Tensor::cat(&parts, 1)?, ctx)
    }
}

fn up2(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    upsample_bilinear(x, 2 * h, 2 * w)
}

pub struct DoubleUNet {
    vgg: Vec<Vec<Conv2d>>,
    aspp1: Aspp,
    dec1: Vec<ConvBlock>,
    out1: Conv2d,
    enc2: Vec<ConvBlock>,
    aspp2: Aspp,
    dec2: Vec<ConvBlock>,
    out2: Conv2d,
}

impl DoubleUNet {
    pub fn new(p: &ParamPath) -> Result<Self> {
        let e = p.pp("vgg");
        let mut vgg = Vec::new();
        let mut c = 3;
        for (b, &(f, n)) in VGG19.iter().enumerate() {
            let mut block = Vec::new();
            for l in 0..n {
                block.push(Conv2d::new(&e.pp(format!("b{b}.{l}")), c, f, ConvCfg::k(3))?);
                c = f;
            }
            vgg.push(block);
        }
        let skips1 = [512, 256, 128, 64];
        let aspp1 = Aspp::new(&p.pp("aspp1"), c, ASPP_FILTERS)?;
        let mut dec1 = Vec::new();
        let mut c = ASPP_FILTERS;
        for (k, &f) in DECODER.iter().enumerate() {
            dec1.push(ConvBlock::new(&p.pp(format!("dec1.{k}")), c + skips1[k], f)?);
            c = f;
        }
        let out1 = Conv2d::new(&p.pp("out1"), c, 1, ConvCfg::k(1))?;

        let mut enc2 = Vec::new();
        let mut c = 3;
        for (k, &f) in ENCODER2.iter().enumerate() {
            enc2.push(ConvBlock::new(&p.pp(format!("enc2.{k}")), c, f)?);
            c = f;
        }
        let aspp2 = Aspp::new(&p.pp("aspp2"), c, ASPP_FILTERS)?;
        let mut dec2 = Vec::new();
        let mut c = ASPP_FILTERS;
        for (k, &f) in DECODER.iter().enumerate() {
            let c_in = c + skips1[k] + ENCODER2[ENCODER2.len() - 1 - k];
            dec2.push(ConvBlock::new(&p.pp(format!("dec2.{k}")), c_in, f)?);
            c = f;
        }
        let out2 = Conv2d::new(&p.pp("out2"), c, 1, ConvCfg::k(1))?;
        Ok(Self {
            vgg,
            aspp1,
            dec1,
            out1,
            enc2,
            aspp2,
            dec2,
            out2,
        })
    }

    /// Both sigmoid maps, first network then second.
    pub fn forward_both(&self, x: &Tensor, ctx: Ctx) -> Result<(Tensor, Tensor)> {
        let mut h = x.clone();
        let mut skips1 = Vec::new();
        for (b, block) in self.vgg.iter().enumerate() {
            if b > 0 {
                h = max_pool2(&h)?;
            }
            for conv in block {
                h = conv.forward(&h, ctx)?.relu()?;
            }
            if b + 1 < self.vgg.len() {
                skips1.push(h.clone());
            }
        }
        h = self.aspp1.forward(&h, ctx)?;
        for (k, block) in self.dec1.iter().enumerate() {
            h = block.forward(&Tensor::cat(&[&up2(&h)?, &skips1[3 - k]], 1)?, ctx)?;
        }
        let y1 = sigmoid(&self.out1.forward(&h, ctx)?)?;

        let mut h = x.broadcast_mul(&y1)?;
        let mut skips2 = Vec::new();
        for block in &self.enc2 {
            h = block.forward(&h, ctx)?;
            skips2.push(h.clone());
            h = max_pool2(&h)?;
        }
        h = self.aspp2.forward(&h, ctx)?;
        for (k, block) in self.dec2.iter().enumerate() {
            let cat = Tensor::cat(&[&up2(&h)?, &skips1[3 - k], &skips2[3 - k]], 1)?;
            h = block.forward(&cat, ctx)?;
        }
        let y2 = sigmoid(&self.out2.forward(&h, ctx)?)?;
        Ok((y1, y2))
    }
}

impl Network for DoubleUNet {
    /// Mean of the two maps, so the output stays a single probability channel.
    fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (y1, y2) = self.forward_both(x, ctx)?;
        Ok(((y1 + y2)? * 0.5)?)
    }

    fn divisor(&self) -> usize {
        16
    }
}
