//! Small tensor building blocks shared by every network in the crate.
//!
//! Trainable weights are [`Var`]s; frozen weights are plain [`Tensor`]s, which
//! keeps them out of every gradient computation.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

pub const LRELU_SLOPE: f64 = 0.2;
/// Added to the variance before the square root in instance statistics.
pub const ADAIN_EPS: f64 = 1e-8;

pub fn device() -> Device {
    Device::Cpu
}

/// Deterministic RNG for a named sub-network under a parent seed.
pub fn rng_for(seed: u64, tag: &str) -> ChaCha8Rng {
    // FNV-1a over the tag keeps sub-network streams independent of creation order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// Unit Gaussian samples scaled by `1/sqrt(fan_in)`.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v * scale
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, &device())?.to_dtype(dtype)?)
}

pub fn constant(value: f64, shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::full(value, shape, &device())?.to_dtype(dtype)?)
}

/// Copies a variable into fresh storage.
pub fn clone_var(v: &Var) -> Result<Var> {
    Ok(Var::from_tensor(&v.as_tensor().detach())?)
}

/// Anything holding trainable variables.
pub trait Parameters {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var));

    fn named_params(&self, prefix: &str) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.visit_params(prefix, &mut |name, v| out.push((name, v.clone())));
        out
    }

    fn vars(&self) -> Vec<Var> {
        self.named_params("").into_iter().map(|(_, v)| v).collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Trainable `y = x Wᵀ + b` on `[N, in]` inputs.
#[derive(Debug)]
pub struct Affine {
    pub weight: Var,
    pub bias: Var,
}

impl Affine {
    pub fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias_init: f64, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(&gaussian(rng, &[d_out, d_in], d_in, dtype)?)?,
            bias: Var::from_tensor(&constant(bias_init, &[d_out], dtype)?)?,
        })
    }

    pub fn from_tensors(weight: &Tensor, bias: &Tensor) -> Result<Self> {
        Ok(Self {
            weight: Var::from_tensor(weight)?,
            bias: Var::from_tensor(bias)?,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.as_tensor().t()?)?.broadcast_add(self.bias.as_tensor())?)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            weight: clone_var(&self.weight)?,
            bias: clone_var(&self.bias)?,
        })
    }
}

impl Parameters for Affine {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }
}

/// Trainable square-kernel convolution with "same" padding for odd kernels.
#[derive(Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Option<Var>,
    pub stride: usize,
}

impl Conv {
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        dtype: DType,
    ) -> Result<Self> {
        let w = gaussian(rng, &[c_out, c_in, kernel, kernel], c_in * kernel * kernel, dtype)?;
        let bias = if bias {
            Some(Var::from_tensor(&constant(0.0, &[c_out], dtype)?)?)
        } else {
            None
        };
        Ok(Self {
            weight: Var::from_tensor(&w)?,
            bias,
            stride,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, self.weight.as_tensor(), self.bias.as_ref().map(|b| b.as_tensor()), self.stride)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            weight: clone_var(&self.weight)?,
            bias: self.bias.as_ref().map(clone_var).transpose()?,
            stride: self.stride,
        })
    }
}

impl Parameters for Conv {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize) -> Result<Tensor> {
    let k = weight.dims()[2];
    let y = x.conv2d(weight, k / 2, stride, 1, 1)?;
    match bias {
        Some(b) => Ok(y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?),
        None => Ok(y),
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * LRELU_SLOPE)?)?)
}

/// `log(1 + exp(x))`, stable for large |x|.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = (x.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Per-sample, per-channel mean and standard deviation over the spatial axes,
/// both shaped `[N, C, 1, 1]`.
pub fn instance_moments(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let std = (var + ADAIN_EPS)?.sqrt()?;
    Ok((mean, std))
}

/// Instance normalization followed by per-sample affine restyling.
/// `scale` and `shift` are `[N, C]`.
pub fn adain_tensor(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let (n, c, _, _) = x.dims4()?;
    let (mean, std) = instance_moments(x)?;
    let normalized = x.broadcast_sub(&mean)?.broadcast_div(&std)?;
    Ok(normalized
        .broadcast_mul(&scale.reshape((n, c, 1, 1))?)?
        .broadcast_add(&shift.reshape((n, c, 1, 1))?)?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}
