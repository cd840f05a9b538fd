//! Minimal layer toolkit on top of `candle-core`.
//!
//! Parameters live in a [`ParamStore`] keyed by dotted paths, initialized from
//! a seeded ChaCha stream so that two builds with the same seed are
//! bit-identical. Layers take a [`Ctx`] that selects batch-norm mode and
//! whether the forward pass records an autograd graph.

use std::collections::{HashMap, HashSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use candle_core::{CpuStorage, CustomOp2, DType, Device, Layout, Shape, Storage, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Forward-pass mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ctx {
    /// Batch-norm uses batch statistics and updates running averages.
    pub train: bool,
    /// Record the autograd graph through parameters.
    pub grad: bool,
}

impl Ctx {
    pub const TRAIN: Ctx = Ctx { train: true, grad: true };
    pub const EVAL: Ctx = Ctx { train: false, grad: false };

    /// Parameter tensor as seen by this pass. Detached when gradients are off so
    /// that inference does not keep every intermediate alive.
    pub fn param(&self, var: &Var) -> Tensor {
        if self.grad {
            var.as_tensor().clone()
        } else {
            var.as_tensor().detach()
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// U(-b, b) with b = sqrt(6 / (fan_in + fan_out)), the Keras default.
    GlorotUniform { fan_in: usize, fan_out: usize },
    Uniform(f64),
}

pub struct Param {
    pub name: String,
    pub var: Var,
    pub trainable: bool,
}

struct StoreInner {
    params: Vec<Param>,
    names: HashSet<String>,
    rng: ChaCha8Rng,
}

/// Named, seeded parameter storage shared by all layers of one network.
#[derive(Clone)]
pub struct ParamStore {
    inner: Arc<Mutex<StoreInner>>,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Arc::new(Mutex::new(StoreInner {
                params: Vec::new(),
                names: HashSet::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            })),
            device: Device::Cpu,
            dtype,
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> ParamPath {
        ParamPath {
            store: self.clone(),
            prefix: String::new(),
        }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, StoreInner> {
        self.inner.lock().expect("parameter store poisoned")
    }

    fn create(&self, name: String, shape: Shape, init: Init, trainable: bool) -> Result<Var> {
        let mut inner = self.lock();
        if !inner.names.insert(name.clone()) {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        let n = shape.elem_count();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
            Init::GlorotUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.gen_range(-bound..=bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| inner.rng.gen_range(-bound..=bound)).collect(),
        };
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        inner.params.push(Param {
            name,
            var: var.clone(),
            trainable,
        });
        Ok(var)
    }

    /// Trainable variables in creation order.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.lock()
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.var.clone())
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.lock()
            .params
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.var.clone())
    }

    pub fn names(&self) -> Vec<String> {
        self.lock().params.iter().map(|p| p.name.clone()).collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.lock()
            .params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// Trainable plus non-trainable (running statistics) scalars.
    pub fn num_total(&self) -> usize {
        self.lock().params.iter().map(|p| p.var.elem_count()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let map: HashMap<String, Tensor> = self
            .lock()
            .params
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ParamStore::save`]. Every parameter of
    /// this store must be present with a matching shape.
    pub fn load(&self, path: &Path) -> Result<()> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let inner = self.lock();
        for p in &inner.params {
            let t = tensors.get(&p.name).ok_or_else(|| {
                Error::InvalidConfig(format!(
                    "checkpoint {} lacks parameter `{}`",
                    path.display(),
                    p.name
                ))
            })?;
            if t.dims() != p.var.dims() {
                return Err(Error::ShapeMismatch(format!(
                    "`{}`: checkpoint {:?} vs model {:?}",
                    p.name,
                    t.dims(),
                    p.var.dims()
                )));
            }
            p.var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Loads the tensors of a checkpoint whose names start with `prefix` and
    /// whose shapes match; everything else keeps its current value.
    pub fn load_matching(&self, path: &Path, prefix: &str) -> Result<usize> {
        let tensors = candle_core::safetensors::load(path, &self.device)?;
        let inner = self.lock();
        let mut loaded = 0;
        for p in inner.params.iter().filter(|p| p.name.starts_with(prefix)) {
            if let Some(t) = tensors.get(&p.name) {
                if t.dims() == p.var.dims() {
                    p.var.set(&t.to_dtype(self.dtype)?)?;
                    loaded += 1;
                }
            }
        }
        Ok(loaded)
    }

    /// Copies every parameter whose name and shape also exist in `other`.
    /// Returns the number of copied tensors.
    pub fn copy_matching_from(&self, other: &ParamStore) -> Result<usize> {
        let src: HashMap<String, Tensor> = other
            .lock()
            .params
            .iter()
            .map(|p| (p.name.clone(), p.var.as_tensor().clone()))
            .collect();
        let inner = self.lock();
        let mut copied = 0;
        for p in &inner.params {
            if let Some(t) = src.get(&p.name) {
                if t.dims() == p.var.dims() {
                    p.var.set(&t.to_dtype(self.dtype)?)?;
                    copied += 1;
                }
            }
        }
        Ok(copied)
    }
}

/// A prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct ParamPath {
    store: ParamStore,
    prefix: String,
}

impl ParamPath {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store.clone(),
            prefix,
        }
    }

    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn var(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape.into(), init, true)
    }

    /// Non-trainable state such as batch-norm running statistics.
    pub fn buffer(&self, name: &str, shape: impl Into<Shape>, init: Init) -> Result<Var> {
        self.store.create(self.full(name), shape.into(), init, false)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// 2-D convolution whose backward pass avoids the slow CPU transposed
/// convolution for stride-1 layers by convolving with the flipped kernel.
struct ConvOp {
    padding: usize,
    stride: usize,
    dilation: usize,
}

fn tensor_from_cpu(s: &CpuStorage, l: &Layout) -> candle_core::Result<Tensor> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv input must be contiguous".into()))?;
    match s {
        CpuStorage::F32(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        CpuStorage::F64(v) => Tensor::from_slice(&v[start..end], l.shape(), &Device::Cpu),
        _ => Err(candle_core::Error::Msg("conv supports f32 and f64 only".into())),
    }
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d-fastbwd"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x = tensor_from_cpu(s1, l1)?;
        let w = tensor_from_cpu(s2, l2)?;
        let y = x.conv2d(&w, self.padding, self.stride, self.dilation, 1)?;
        let shape = y.shape().clone();
        let (storage, _) = y.storage_and_layout();
        match &*storage {
            Storage::Cpu(cs) => Ok((cs.clone(), shape)),
            _ => Err(candle_core::Error::Msg("expected cpu storage".into())),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let grad_x = if x.track_op() {
            let k = w.dim(2)?;
            let reach = self.dilation * (k - 1);
            let g = if self.stride == 1 && reach >= self.padding {
                let w_t = w.flip(&[2, 3])?.transpose(0, 1)?.contiguous()?;
                grad.conv2d(&w_t, reach - self.padding, 1, self.dilation, 1)?
            } else {
                let grad_h = grad.dim(2)?;
                let out_size = (grad_h - 1) * self.stride + reach + 1 - 2 * self.padding;
                let out_padding = x.dim(2)? - out_size;
                grad.conv_transpose2d(w, self.padding, out_padding, self.stride, self.dilation)?
            };
            Some(g)
        } else {
            None
        };
        let grad_w = x
            .transpose(0, 1)?
            .contiguous()?
            .conv2d(
                &grad.transpose(0, 1)?.contiguous()?,
                self.padding,
                self.dilation,
                self.stride,
                1,
            )?
            .transpose(0, 1)?;
        let (_, _, kh, kw) = w.dims4()?;
        let (_, _, gh, gw) = grad_w.dims4()?;
        let grad_w = if gh != kh || gw != kw {
            grad_w.narrow(2, 0, kh)?.narrow(3, 0, kw)?
        } else {
            grad_w
        };
        Ok((grad_x, Some(grad_w)))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvCfg {
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl ConvCfg {
    pub fn k(kernel: usize) -> Self {
        Self {
            kernel,
            stride: 1,
            dilation: 1,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn no_bias(mut self) -> Self {
        self.bias = false;
        self
    }
}

/// Conv layer with "same" padding for odd kernels.
pub struct Conv2d {
    weight: Var,
    bias: Option<Var>,
    cfg: ConvCfg,
}

impl Conv2d {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, cfg: ConvCfg) -> Result<Self> {
        let k = cfg.kernel;
        let weight = p.var(
            "weight",
            (c_out, c_in, k, k),
            Init::GlorotUniform {
                fan_in: c_in * k * k,
                fan_out: c_out * k * k,
            },
        )?;
        let bias = if cfg.bias {
            Some(p.var("bias", c_out, Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias, cfg })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let padding = self.cfg.dilation * (self.cfg.kernel - 1) / 2;
        let op = ConvOp {
            padding,
            stride: self.cfg.stride,
            dilation: self.cfg.dilation,
        };
        let y = x.contiguous()?.apply_op2(&ctx.param(&self.weight), op)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&ctx.param(b).reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }

    /// Overwrites all weights with `weight` and all biases with `bias`.
    pub fn fill(&self, weight: f64, bias: f64) -> Result<()> {
        self.weight.set(&self.weight.ones_like()?.affine(weight, 0.0)?)?;
        if let Some(b) = &self.bias {
            b.set(&b.ones_like()?.affine(bias, 0.0)?)?;
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

/// Batch normalization over `(batch, height, width)` per channel.
pub struct BatchNorm2d {
    gamma: Var,
    beta: Var,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(p: &ParamPath, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: p.var("gamma", channels, Init::Ones)?,
            beta: p.var("beta", channels, Init::Zeros)?,
            running_mean: p.buffer("running_mean", channels, Init::Zeros)?,
            running_var: p.buffer("running_var", channels, Init::Ones)?,
            momentum: 0.9,
            eps: 1e-3,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if ctx.train {
            let mean = x.mean_keepdim((0, 2, 3))?;
            let centered = x.broadcast_sub(&mean)?;
            let var = centered.sqr()?.mean_keepdim((0, 2, 3))?;
            let m = self.momentum;
            let new_mean = (self.running_mean.as_tensor().affine(m, 0.0)?
                + mean.detach().flatten_all()?.affine(1.0 - m, 0.0)?)?;
            let new_var = (self.running_var.as_tensor().affine(m, 0.0)?
                + var.detach().flatten_all()?.affine(1.0 - m, 0.0)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().detach().reshape((1, c, 1, 1))?,
                self.running_var.as_tensor().detach().reshape((1, c, 1, 1))?,
            )
        };
        let inv = (var + self.eps)?.sqrt()?.recip()?;
        let scale = ctx.param(&self.gamma).reshape((1, c, 1, 1))?.mul(&inv)?;
        let y = x.broadcast_sub(&mean)?.broadcast_mul(&scale)?;
        Ok(y.broadcast_add(&ctx.param(&self.beta).reshape((1, c, 1, 1))?)?)
    }
}

/// Conv → batch norm → ReLU.
pub struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, cfg: ConvCfg) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&p.pp("conv"), c_in, c_out, cfg)?,
            bn: BatchNorm2d::new(&p.pp("bn"), c_out)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(self.bn.forward(&self.conv.forward(x, ctx)?, ctx)?.relu()?)
    }
}

/// Fully connected layer on `(batch, features)`.
pub struct Dense {
    weight: Var,
    bias: Var,
}

impl Dense {
    pub fn new(p: &ParamPath, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var("weight", (d_in, d_out), Init::GlorotUniform { fan_in: d_in, fan_out: d_out })?,
            bias: p.var("bias", d_out, Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        Ok(x.matmul(&ctx.param(&self.weight))?
            .broadcast_add(&ctx.param(&self.bias))?)
    }

    pub fn fill(&self, weight: f64, bias: f64) -> Result<()> {
        self.weight.set(&self.weight.ones_like()?.affine(weight, 0.0)?)?;
        self.bias.set(&self.bias.ones_like()?.affine(bias, 0.0)?)?;
        Ok(())
    }
}

/// Transposed convolution with a 2×2 kernel and stride 2, written as a matmul
/// followed by a pixel shuffle.
pub struct UpConv2x2 {
    weight: Var,
    bias: Var,
    c_out: usize,
}

impl UpConv2x2 {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            weight: p.var(
                "weight",
                (c_in, c_out * 4),
                Init::GlorotUniform {
                    fan_in: 4 * c_out,
                    fan_out: 4 * c_in,
                },
            )?,
            bias: p.var("bias", c_out, Init::Zeros)?,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor, ctx: Ctx) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let cols = x
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b * h * w, c))?
            .matmul(&ctx.param(&self.weight))?;
        let y = cols
            .reshape(vec![b, h, w, self.c_out, 2, 2])?
            .permute(vec![0, 3, 1, 4, 2, 5])?
            .contiguous()?
            .reshape((b, self.c_out, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&ctx.param(&self.bias).reshape((1, self.c_out, 1, 1))?)?)
    }
}

/// Row-stochastic bilinear interpolation matrix (half-pixel centers).
fn bilinear_matrix(n_out: usize, n_in: usize) -> Vec<f64> {
    let mut m = vec![0.0; n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (src.floor() as usize).min(n_in - 1);
        let hi = (lo + 1).min(n_in - 1);
        let frac = src - lo as f64;
        m[i * n_in + lo] += 1.0 - frac;
        m[i * n_in + hi] += frac;
    }
    m
}

/// Bilinear resize of `(B, C, H, W)` to `(B, C, h_out, w_out)`; differentiable.
pub fn upsample_bilinear(x: &Tensor, h_out: usize, w_out: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == h_out && w == w_out {
        return Ok(x.clone());
    }
    let dev = x.device();
    let mw = Tensor::from_vec(bilinear_matrix(w_out, w), (w_out, w), dev)?
        .to_dtype(x.dtype())?
        .t()?;
    let mh = Tensor::from_vec(bilinear_matrix(h_out, h), (h_out, h), dev)?.to_dtype(x.dtype())?;
    let y = x.broadcast_matmul(&mw)?;
    Ok(mh.broadcast_matmul(&y)?)
}

pub fn max_pool2(x: &Tensor) -> Result<Tensor> {
    Ok(x.max_pool2d(2)?)
}

/// 3×3 max pooling with stride 2 and one pixel of zero padding, assembled
/// from strided views so that it stays differentiable.
pub fn max_pool3_s2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let padded = x.pad_with_zeros(2, 1, 1)?.pad_with_zeros(3, 1, 1)?;
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let wp = w + 2;
    let mut out: Option<Tensor> = None;
    for di in 0..3 {
        let rows = padded
            .narrow(2, di, 2 * ho)?
            .reshape(vec![b, c, ho, 2, wp])?
            .narrow(3, 0, 1)?
            .squeeze(3)?;
        for dj in 0..3 {
            let win = rows
                .narrow(3, dj, 2 * wo)?
                .reshape(vec![b, c, ho, wo, 2])?
                .narrow(4, 0, 1)?
                .squeeze(4)?;
            out = Some(match out {
                None => win,
                Some(acc) => acc.maximum(&win)?,
            });
        }
    }
    Ok(out.expect("nine windows"))
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?)
}

/// Mean over spatial dims, keeping `(B, C, 1, 1)`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_keepdim((2, 3))?)
}

/// Max over spatial dims, keeping `(B, C, 1, 1)`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(2)?.max_keepdim(D::Minus1)?.unsqueeze(3)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store64() -> ParamStore {
        ParamStore::new(7, DType::F64)
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Central-difference gradient of `f` w.r.t. each element of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-5;
        (0..base.len())
            .map(|i| {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let tp = Tensor::from_vec(plus, x.shape(), &Device::Cpu).unwrap();
                let tm = Tensor::from_vec(minus, x.shape(), &Device::Cpu).unwrap();
                (f(&tp) - f(&tm)) / (2.0 * h)
            })
            .collect()
    }

    fn check_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> Tensor) {
        let var = Var::from_tensor(x).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let analytic: Vec<f64> = grads
            .get(var.as_tensor())
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1()
            .unwrap();
        let numeric = numeric_grad(x, &|t| f(t).to_scalar::<f64>().unwrap());
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-6);
            assert!((a - n).abs() / denom < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn conv_counts_weights_and_bias() {
        let store = ParamStore::new(0, DType::F32);
        Conv2d::new(&store.root().pp("c"), 3, 8, ConvCfg::k(3)).unwrap();
        assert_eq!(store.num_trainable(), 3 * 3 * 3 * 8 + 8);
        assert_eq!(ParamStore::new(0, DType::F32).num_trainable(), 0);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ParamStore::new(11, DType::F32);
        let b = ParamStore::new(11, DType::F32);
        Conv2d::new(&a.root(), 4, 4, ConvCfg::k(3)).unwrap();
        Conv2d::new(&b.root(), 4, 4, ConvCfg::k(3)).unwrap();
        let wa: Vec<f32> = a.get("weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b.get("weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
    }

    #[test]
    fn duplicate_names_rejected() {
        let s = ParamStore::new(0, DType::F32);
        s.root().var("w", 3, Init::Zeros).unwrap();
        assert!(s.root().var("w", 3, Init::Zeros).is_err());
    }

    #[test]
    fn conv_matches_candle_reference() {
        let store = store64();
        let conv = Conv2d::new(&store.root(), 3, 5, ConvCfg::k(3).no_bias()).unwrap();
        let x = rand_input(&[2, 3, 6, 6], 1);
        let ours = conv.forward(&x, Ctx::EVAL).unwrap();
        let w = store.get("weight").unwrap();
        let reference = x.conv2d(w.as_tensor(), 1, 1, 1, 1).unwrap();
        let diff = (ours - reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn conv_input_gradients_match_finite_differences() {
        for cfg in [
            ConvCfg::k(3),
            ConvCfg::k(3).dilation(2),
            ConvCfg::k(3).stride(2),
            ConvCfg::k(7).stride(2),
            ConvCfg::k(1),
        ] {
            let store = store64();
            let conv = Conv2d::new(&store.root(), 2, 3, cfg).unwrap();
            let x = rand_input(&[1, 2, 8, 8], 2);
            let w = rand_input(&[1, 3, 8 / cfg.stride, 8 / cfg.stride], 3);
            check_grad(&x, &|t| {
                conv.forward(t, Ctx::TRAIN)
                    .unwrap()
                    .mul(&w)
                    .unwrap()
                    .sum_all()
                    .unwrap()
            });
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let store = store64();
        let x = rand_input(&[2, 2, 6, 6], 4);
        let w0 = rand_input(&[3, 2, 3, 3], 5);
        let probe = rand_input(&[2, 3, 6, 6], 6);
        let f = |w: &Tensor| {
            x.apply_op2(
                w,
                ConvOp {
                    padding: 1,
                    stride: 1,
                    dilation: 1,
                },
            )
            .unwrap()
            .mul(&probe)
            .unwrap()
            .sum_all()
            .unwrap()
        };
        check_grad(&w0, &f);
        drop(store);
    }

    #[test]
    fn upconv_doubles_resolution() {
        let store = store64();
        let up = UpConv2x2::new(&store.root(), 4, 3).unwrap();
        let x = rand_input(&[2, 4, 5, 6], 7);
        let y = up.forward(&x, Ctx::EVAL).unwrap();
        assert_eq!(y.dims(), &[2, 3, 10, 12]);
        assert_eq!(store.num_trainable(), 4 * 3 * 4 + 3);
        let probe = rand_input(&[2, 3, 10, 12], 8);
        check_grad(&x, &|t| {
            up.forward(t, Ctx::TRAIN).unwrap().mul(&probe).unwrap().sum_all().unwrap()
        });
    }

    #[test]
    fn bilinear_matches_reference_and_preserves_constants() {
        let x = Tensor::ones((1, 2, 4, 4), DType::F64, &Device::Cpu).unwrap();
        let y = upsample_bilinear(&x, 8, 8).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|&e| (e - 1.0).abs() < 1e-12));
        // 1-D ramp [0, 1] upsampled ×2 with half-pixel centers.
        let ramp = Tensor::new(&[[[[0f64, 1.0]]]], &Device::Cpu).unwrap();
        let up = upsample_bilinear(&ramp, 1, 4).unwrap();
        let got: Vec<f64> = up.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(got, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn maxpool3_matches_bruteforce() {
        let x = rand_input(&[1, 2, 8, 8], 9).relu().unwrap();
        let y = max_pool3_s2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 2, 4, 4]);
        let xv: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let yv: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        for c in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let mut m = 0.0f64;
                    for di in 0..3 {
                        for dj in 0..3 {
                            let (r, q) = (2 * i + di, 2 * j + dj);
                            if (1..=8).contains(&r) && (1..=8).contains(&q) {
                                m = m.max(xv[c * 64 + (r - 1) * 8 + (q - 1)]);
                            }
                        }
                    }
                    assert_eq!(yv[c * 16 + i * 4 + j], m);
                }
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes_and_eval_uses_running_stats() {
        let store = store64();
        let bn = BatchNorm2d::new(&store.root(), 3).unwrap();
        let x = rand_input(&[4, 3, 5, 5], 10).affine(3.0, 2.0).unwrap();
        let y = bn.forward(&x, Ctx::TRAIN).unwrap();
        let mean: Vec<f64> = y.mean_keepdim((0, 2, 3)).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        // Repeated training passes on the same batch converge the running stats.
        for _ in 0..200 {
            bn.forward(&x, Ctx::TRAIN).unwrap();
        }
        let train = bn.forward(&x, Ctx::TRAIN).unwrap();
        let eval = bn.forward(&x, Ctx::EVAL).unwrap();
        let diff = (train - eval).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(diff < 1e-6, "{diff}");
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = ParamStore::new(1, DType::F32);
        Conv2d::new(&a.root().pp("x"), 2, 2, ConvCfg::k(3)).unwrap();
        let b = ParamStore::new(2, DType::F32);
        Conv2d::new(&b.root().pp("x"), 2, 2, ConvCfg::k(3)).unwrap();
        let path = dir.path().join("m.ckpt");
        a.save(&path).unwrap();
        b.load(&path).unwrap();
        let wa: Vec<f32> = a.get("x.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let wb: Vec<f32> = b.get("x.weight").unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(wa, wb);
    }
}
