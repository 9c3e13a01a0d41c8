//! Style-based synthesis stack: mapping network, AdaIN-modulated synthesis
//! blocks, per-layer modulated residual (ModRes) injection points and the
//! tanh RGB head.
//!
//! Layer `k` (0-based) runs at resolution `4 * 2^ceil(k / 2)`, capped at the
//! output resolution: one 4x4 block, then pairs per resolution. The default
//! eight layers run 4, 8, 8, 16, 16, 32, 32, 64.

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{validation, Result};
use crate::image_pipeline::ImageTensor;
use crate::nn::{self, adain_tensor, clone_var, join, lrelu, Affine, Conv, Parameters};

pub fn layer_resolution(k: usize, output_resolution: usize) -> usize {
    let doublings = k.div_ceil(2);
    let res = 4usize.checked_shl(doublings as u32).unwrap_or(usize::MAX);
    res.min(output_resolution)
}

pub fn layer_channels(resolution: usize, cfg: &ModelConfig) -> usize {
    (1024 / resolution).clamp(cfg.min_channels, cfg.max_channels)
}

/// A single latent vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode(pub Vec<f64>);

impl LatentCode {
    pub fn zeros(d: usize) -> Self {
        Self(vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `[1, d]` row tensor.
    pub fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.0, (1, self.0.len()), &nn::device())?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self(nn::to_f64_vec(t)?))
    }

    pub fn add_scaled(&self, other: &[f64], scale: f64) -> Self {
        Self(self.0.iter().zip(other).map(|(a, b)| a + scale * b).collect())
    }

    pub fn random(rng: &mut ChaCha8Rng, d: usize) -> Self {
        use rand_distr::{Distribution, StandardNormal};
        Self((0..d).map(|_| StandardNormal.sample(rng)).collect())
    }
}

/// One latent per synthesis layer. Layers before `split` (1-based layer
/// indices below it) come from the first code of a mix, the rest from the
/// second.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseLatent {
    per_layer: Vec<LatentCode>,
    split: usize,
}

impl LayerwiseLatent {
    pub fn new(per_layer: Vec<LatentCode>, split: usize) -> Result<Self> {
        if per_layer.is_empty() {
            return validation("layerwise latent needs at least one layer");
        }
        if split < 1 || split > per_layer.len() {
            return validation(format!("split index {split} outside 1..={}", per_layer.len()));
        }
        let d = per_layer[0].dim();
        if per_layer.iter().any(|c| c.dim() != d || !c.is_finite()) {
            return validation("layer codes must share a dimension and be finite");
        }
        Ok(Self { per_layer, split })
    }

    /// The same code at every layer.
    pub fn broadcast(code: &LatentCode, layers: usize) -> Result<Self> {
        Self::new(vec![code.clone(); layers], layers.max(1))
    }

    /// Layers `1..split` (1-based) take `coarse`, layers `split..=L` take `fine`.
    pub fn mixed(coarse: &LatentCode, fine: &LatentCode, layers: usize, split: usize) -> Result<Self> {
        let per_layer = (1..=layers)
            .map(|k| if k < split { coarse.clone() } else { fine.clone() })
            .collect();
        Self::new(per_layer, split)
    }

    pub fn layers(&self) -> &[LatentCode] {
        &self.per_layer
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn len(&self) -> usize {
        self.per_layer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_layer.is_empty()
    }

    /// One `[1, d]` tensor per layer.
    pub fn to_tensors(&self, dtype: DType) -> Result<Vec<Tensor>> {
        self.per_layer.iter().map(|c| c.to_tensor(dtype)).collect()
    }
}

/// Per-layer blend weights for the extrinsic residuals, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleWeightVector(Vec<f64>);

impl StyleWeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return validation("style weight vector is empty");
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return validation(format!("style weight {w} outside [0, 1]"));
        }
        Ok(Self(weights))
    }

    pub fn filled(value: f64, layers: usize) -> Result<Self> {
        Self::new(vec![value; layers])
    }

    pub fn zeros(layers: usize) -> Self {
        Self(vec![0.0; layers])
    }

    pub fn ones(layers: usize) -> Self {
        Self(vec![1.0; layers])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Affine layers; the first computes `b + W z`, each later one applies a leaky
/// rectifier and then its affine map.
#[derive(Debug)]
pub struct MappingNetwork {
    layers: Vec<Affine>,
}

impl MappingNetwork {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, depth: usize, dtype: DType) -> Result<Self> {
        if depth == 0 {
            return validation("mapping network depth must be positive");
        }
        let layers = (0..depth)
            .map(|_| Affine::new(rng, d, d, 0.0, dtype))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Builds from explicit `(weight, bias)` pairs; every weight must be square
    /// with the same size.
    pub fn from_layers(layers: Vec<(Tensor, Tensor)>) -> Result<Self> {
        if layers.is_empty() {
            return validation("mapping network depth must be positive");
        }
        let d = layers[0].0.dims()[0];
        for (w, b) in &layers {
            if w.dims() != [d, d] || b.dims() != [d] {
                return validation(format!(
                    "mapping layer shapes {:?}/{:?} do not match d = {d}",
                    w.dims(),
                    b.dims()
                ));
            }
        }
        let layers = layers
            .iter()
            .map(|(w, b)| Affine::from_tensors(w, b))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn dim(&self) -> usize {
        self.layers[0].d_in()
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn dtype(&self) -> DType {
        self.layers[0].weight.dtype()
    }

    /// Forward pass over `[N, d]` rows.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = self.layers[0].forward(z)?;
        for layer in &self.layers[1..] {
            h = layer.forward(&lrelu(&h)?)?;
        }
        Ok(h)
    }

    pub fn map_latent(&self, z: &LatentCode) -> Result<LatentCode> {
        if z.dim() != self.dim() {
            return validation(format!("latent has {} entries, mapping expects {}", z.dim(), self.dim()));
        }
        LatentCode::from_tensor(&self.forward(&z.to_tensor(self.dtype())?)?)
    }

    /// Row-major first-layer weight matrix as `f64`.
    pub fn first_layer_weight(&self) -> Result<Vec<f64>> {
        nn::to_f64_vec(self.layers[0].weight.as_tensor())
    }

    pub fn first_layer_bias(&self) -> Result<Vec<f64>> {
        nn::to_f64_vec(self.layers[0].bias.as_tensor())
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            layers: self.layers.iter().map(Affine::deep_clone).collect::<Result<_>>()?,
        })
    }
}

impl Parameters for MappingNetwork {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_params(&join(prefix, &i.to_string()), f);
        }
    }
}

/// Adaptive instance normalization of a `[C, H, W]` or `[N, C, H, W]` feature
/// map to the given per-channel target mean and standard deviation.
pub fn adain(content: &Tensor, style_mean: &[f64], style_std: &[f64]) -> Result<Tensor> {
    let x = match content.rank() {
        3 => content.unsqueeze(0)?,
        4 => content.clone(),
        r => return validation(format!("adain expects a 3- or 4-d feature map, got rank {r}")),
    };
    let (n, c, _, _) = x.dims4()?;
    if style_mean.len() != c || style_std.len() != c {
        return validation(format!(
            "style statistics have {}/{} entries for {c} channels",
            style_mean.len(),
            style_std.len()
        ));
    }
    if style_std.iter().any(|s| !(*s >= 0.0)) {
        return validation("style standard deviations must be non-negative");
    }
    let dtype = x.dtype();
    let row = |v: &[f64]| -> Result<Tensor> {
        let rows: Vec<f64> = (0..n).flat_map(|_| v.iter().copied()).collect();
        Ok(Tensor::from_vec(rows, (n, c), &nn::device())?.to_dtype(dtype)?)
    };
    let out = adain_tensor(&x, &row(style_std)?, &row(style_mean)?)?;
    if content.rank() == 3 {
        Ok(out.squeeze(0)?)
    } else {
        Ok(out)
    }
}

/// Predicts `[N, 2C]` AdaIN parameters (scale then shift) from `[N, d]` codes.
fn style_head(rng: &mut ChaCha8Rng, d: usize, channels: usize, dtype: DType) -> Result<Affine> {
    let head = Affine::new(rng, d, 2 * channels, 0.0, dtype)?;
    let bias: Vec<f64> = (0..2 * channels).map(|i| if i < channels { 1.0 } else { 0.0 }).collect();
    head.bias.set(&Tensor::from_vec(bias, 2 * channels, &nn::device())?.to_dtype(dtype)?)?;
    Ok(head)
}

fn split_style(style: &Tensor, channels: usize) -> Result<(Tensor, Tensor)> {
    Ok((style.narrow(1, 0, channels)?, style.narrow(1, channels, channels)?))
}

/// A synthesis layer: optional 2x upsample, 3x3 convolution, AdaIN driven by
/// the layer's mapped latent, leaky rectifier.
#[derive(Debug)]
pub struct SynthesisBlock {
    conv: Conv,
    style: Affine,
    upsample: bool,
    resolution: usize,
    channels: usize,
}

impl SynthesisBlock {
    fn forward(&self, x: &Tensor, w: &Tensor) -> Result<Tensor> {
        let x = if self.upsample {
            let (_, _, h, wd) = x.dims4()?;
            x.upsample_nearest2d(h * 2, wd * 2)?
        } else {
            x.clone()
        };
        let x = self.conv.forward(&x)?;
        let (scale, shift) = split_style(&self.style.forward(w)?, self.channels)?;
        lrelu(&adain_tensor(&x, &scale, &shift)?)
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            conv: self.conv.deep_clone()?,
            style: self.style.deep_clone()?,
            upsample: self.upsample,
            resolution: self.resolution,
            channels: self.channels,
        })
    }
}

/// Modulated residual block: `x + conv2(lrelu(adain(conv1(x), head(code))))`.
/// The convolutions carry no bias, so zero filters make the block the identity.
#[derive(Debug)]
pub struct ModResBlock {
    pub conv1: Var,
    pub conv2: Var,
    pub style: Affine,
    channels: usize,
}

impl ModResBlock {
    pub fn new(rng: &mut ChaCha8Rng, channels: usize, kernel: usize, d: usize, dtype: DType) -> Result<Self> {
        let fan_in = channels * kernel * kernel;
        let shape = [channels, channels, kernel, kernel];
        Ok(Self {
            conv1: Var::from_tensor(&nn::gaussian(rng, &shape, fan_in, dtype)?)?,
            conv2: Var::from_tensor(&nn::gaussian(rng, &shape, fan_in, dtype)?)?,
            style: style_head(rng, d, channels, dtype)?,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kernel(&self) -> usize {
        self.conv1.dims()[2]
    }

    /// The residual branch alone, on `[N, C, H, W]` features and `[N, d]` codes.
    pub fn residual(&self, x: &Tensor, code: &Tensor) -> Result<Tensor> {
        let h = nn::conv2d(x, self.conv1.as_tensor(), None, 1)?;
        let (scale, shift) = split_style(&self.style.forward(code)?, self.channels)?;
        let h = lrelu(&adain_tensor(&h, &scale, &shift)?)?;
        nn::conv2d(&h, self.conv2.as_tensor(), None, 1)
    }

    /// `feature + residual(feature, code)` for a `[N, C, H, W]` feature map and
    /// a single style code.
    pub fn forward(&self, feature: &Tensor, style_code: &LatentCode) -> Result<Tensor> {
        if feature.rank() != 4 || feature.dims()[1] != self.channels {
            return validation(format!(
                "feature shape {:?} incompatible with a {}-channel block",
                feature.dims(),
                self.channels
            ));
        }
        if style_code.dim() != self.style.d_in() {
            return validation(format!(
                "style code has {} entries, block expects {}",
                style_code.dim(),
                self.style.d_in()
            ));
        }
        let n = feature.dims()[0];
        let code = style_code.to_tensor(feature.dtype())?.repeat((n, 1))?;
        Ok((feature + self.residual(feature, &code)?)?)
    }

    /// Sum of squared convolution weights.
    pub fn l2(&self) -> Result<Tensor> {
        Ok((self.conv1.as_tensor().sqr()?.sum_all()? + self.conv2.as_tensor().sqr()?.sum_all()?)?)
    }

    pub fn zero_filters(&self) -> Result<()> {
        self.conv1.set(&self.conv1.zeros_like()?)?;
        self.conv2.set(&self.conv2.zeros_like()?)?;
        Ok(())
    }

    /// Identity channel mapping in `conv1` (center tap) and a zero `conv2`, so
    /// the block passes features through unchanged while `conv2` still
    /// receives gradient.
    pub fn identity_filters(&self) -> Result<()> {
        let (c, k) = (self.channels, self.kernel());
        let mut w = vec![0f64; c * c * k * k];
        for ch in 0..c {
            w[((ch * c + ch) * k + k / 2) * k + k / 2] = 1.0;
        }
        let dtype = self.conv1.dtype();
        self.conv1
            .set(&Tensor::from_vec(w, (c, c, k, k), &nn::device())?.to_dtype(dtype)?)?;
        self.conv2.set(&self.conv2.zeros_like()?)?;
        Ok(())
    }

    fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            conv1: clone_var(&self.conv1)?,
            conv2: clone_var(&self.conv2)?,
            style: self.style.deep_clone()?,
            channels: self.channels,
        })
    }
}

impl Parameters for ModResBlock {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        f(join(prefix, "conv1"), &self.conv1);
        f(join(prefix, "conv2"), &self.conv2);
        self.style.visit_params(&join(prefix, "style"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorRole {
    Base,
    Transfer,
}

/// Which extrinsic encoder drives a layer's residual block. Coarse layers
/// (the first half) carry structure from the second encoder, fine layers
/// carry color from the first.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModResPath {
    Enc1,
    Enc2,
}

/// Extrinsic inputs to a synthesis pass: one `[N, d]` code per layer and the
/// per-layer residual weights.
pub struct ExtrinsicStyles<'a> {
    pub codes: &'a [Tensor],
    pub weights: &'a StyleWeightVector,
}

pub struct Synthesis {
    pub image: Option<Tensor>,
    pub activations: Vec<Tensor>,
}

#[derive(Debug)]
pub struct GeneratorModel {
    config: ModelConfig,
    dtype: DType,
    role: GeneratorRole,
    mapping: MappingNetwork,
    constant: Var,
    blocks: Vec<SynthesisBlock>,
    modres: Vec<ModResBlock>,
    to_rgb: Conv,
}

impl GeneratorModel {
    pub fn new(config: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = nn::rng_for(seed, "generator");
        let d = config.d_latent;
        let mapping = MappingNetwork::new(&mut rng, d, config.mapping_depth, dtype)?;
        let c0 = layer_channels(4, config);
        let constant = Var::from_tensor(&nn::gaussian(&mut rng, &[1, c0, 4, 4], 1, dtype)?)?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        let mut modres = Vec::with_capacity(config.n_layers);
        let mut prev = (4, c0);
        for k in 0..config.n_layers {
            let res = layer_resolution(k, config.resolution);
            let ch = layer_channels(res, config);
            blocks.push(SynthesisBlock {
                conv: Conv::new(&mut rng, prev.1, ch, 3, 1, true, dtype)?,
                style: style_head(&mut rng, d, ch, dtype)?,
                upsample: res > prev.0,
                resolution: res,
                channels: ch,
            });
            modres.push(ModResBlock::new(&mut rng, ch, config.modres_kernel, d, dtype)?);
            prev = (res, ch);
        }
        let to_rgb = Conv::new(&mut rng, prev.1, 3, 1, 1, true, dtype)?;
        Ok(Self {
            config: config.clone(),
            dtype,
            role: GeneratorRole::Base,
            mapping,
            constant,
            blocks,
            modres,
            to_rgb,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn role(&self) -> GeneratorRole {
        self.role
    }

    pub fn set_role(&mut self, role: GeneratorRole) {
        self.role = role;
    }

    pub fn n_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn d_latent(&self) -> usize {
        self.config.d_latent
    }

    pub fn mapping(&self) -> &MappingNetwork {
        &self.mapping
    }

    pub fn blocks(&self) -> &[SynthesisBlock] {
        &self.blocks
    }

    pub fn modres_blocks(&self) -> &[ModResBlock] {
        &self.modres
    }

    /// Number of leading (coarse) layers driven by the second encoder.
    pub fn coarse_layers(&self) -> usize {
        self.n_layers() / 2
    }

    pub fn modres_path(&self, layer: usize) -> ModResPath {
        if layer < self.coarse_layers() {
            ModResPath::Enc2
        } else {
            ModResPath::Enc1
        }
    }

    /// Copy with independent storage, tagged with `role`.
    pub fn deep_clone(&self, role: GeneratorRole) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            dtype: self.dtype,
            role,
            mapping: self.mapping.deep_clone()?,
            constant: clone_var(&self.constant)?,
            blocks: self.blocks.iter().map(SynthesisBlock::deep_clone).collect::<Result<_>>()?,
            modres: self.modres.iter().map(ModResBlock::deep_clone).collect::<Result<_>>()?,
            to_rgb: self.to_rgb.deep_clone()?,
        })
    }

    /// Replaces the mapping network (dimensions must match).
    pub fn set_mapping(&mut self, mapping: MappingNetwork) -> Result<()> {
        if mapping.dim() != self.d_latent() {
            return validation(format!("mapping dimension {} != d_latent {}", mapping.dim(), self.d_latent()));
        }
        self.mapping = mapping;
        Ok(())
    }

    /// Parameters of the intrinsic path (everything except the ModRes blocks).
    pub fn intrinsic_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.visit_intrinsic("", &mut |_, v| out.push(v.clone()));
        out
    }

    pub fn modres_vars(&self) -> Vec<Var> {
        self.modres.iter().flat_map(|m| m.vars()).collect()
    }

    fn visit_intrinsic<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        self.mapping.visit_params(&join(prefix, "mapping"), f);
        f(join(prefix, "constant"), &self.constant);
        for (k, b) in self.blocks.iter().enumerate() {
            let p = join(prefix, &format!("blocks.{k}"));
            b.conv.visit_params(&join(&p, "conv"), f);
            b.style.visit_params(&join(&p, "style"), f);
        }
        self.to_rgb.visit_params(&join(prefix, "to_rgb"), f);
    }

    fn check_latents(&self, z: &[Tensor]) -> Result<usize> {
        if z.len() != self.n_layers() {
            return validation(format!("got {} layer latents for {} layers", z.len(), self.n_layers()));
        }
        let n = z[0].dims()[0];
        for t in z {
            if t.dims() != [n, self.d_latent()] {
                return validation(format!(
                    "layer latent shape {:?}, expected [{n}, {}]",
                    t.dims(),
                    self.d_latent()
                ));
            }
        }
        Ok(n)
    }

    /// Runs the synthesis stack on per-layer `[N, d]` latents. With
    /// `stop_after = Some(k)` only the first `k` block activations are
    /// produced and no image is rendered.
    pub fn synthesize(
        &self,
        z: &[Tensor],
        extrinsic: Option<&ExtrinsicStyles<'_>>,
        stop_after: Option<usize>,
    ) -> Result<Synthesis> {
        let n = self.check_latents(z)?;
        if let Some(ext) = extrinsic {
            if ext.codes.len() != self.n_layers() || ext.weights.len() != self.n_layers() {
                return validation(format!(
                    "extrinsic inputs cover {}/{} layers, generator has {}",
                    ext.codes.len(),
                    ext.weights.len(),
                    self.n_layers()
                ));
            }
        }
        let last = stop_after.unwrap_or(self.n_layers());
        let c0 = self.constant.dims()[1];
        let mut x = self.constant.as_tensor().broadcast_as((n, c0, 4, 4))?.contiguous()?;
        let mut activations = Vec::with_capacity(last);
        for (k, block) in self.blocks.iter().enumerate().take(last) {
            let w = self.mapping.forward(&z[k])?;
            x = block.forward(&x, &w)?;
            if let Some(ext) = extrinsic {
                let weight = ext.weights.as_slice()[k];
                // A zero weight skips the branch, so the intrinsic output is reproduced exactly.
                if weight != 0.0 {
                    let r = self.modres[k].residual(&x, &ext.codes[k])?;
                    x = (x + (r * weight)?)?;
                }
            }
            activations.push(x.clone());
        }
        let image = if stop_after.is_none() {
            Some(self.to_rgb.forward(&x)?.tanh()?)
        } else {
            None
        };
        Ok(Synthesis { image, activations })
    }

    /// Intrinsic-path image batch (`[N, 3, H, W]`) with every residual off.
    pub fn synthesize_intrinsic_batch(&self, z: &[Tensor]) -> Result<Tensor> {
        Ok(self.synthesize(z, None, None)?.image.expect("full pass renders an image"))
    }

    pub fn synthesize_intrinsic(&self, c: &LayerwiseLatent) -> Result<ImageTensor> {
        self.check_layerwise(c)?;
        ImageTensor::from_tensor(&self.synthesize_intrinsic_batch(&c.to_tensors(self.dtype)?)?)
    }

    pub(crate) fn check_layerwise(&self, c: &LayerwiseLatent) -> Result<()> {
        if c.len() != self.n_layers() {
            return validation(format!("latent covers {} layers, generator has {}", c.len(), self.n_layers()));
        }
        if c.layers()[0].dim() != self.d_latent() {
            return validation(format!(
                "latent dimension {} != generator d_latent {}",
                c.layers()[0].dim(),
                self.d_latent()
            ));
        }
        Ok(())
    }

    /// Activations of blocks `1..=k_max` on the intrinsic path.
    pub fn block_activations_batch(&self, z: &[Tensor], k_max: usize) -> Result<Vec<Tensor>> {
        if k_max < 1 || k_max > self.n_layers() {
            return validation(format!("k_max {k_max} outside 1..={}", self.n_layers()));
        }
        Ok(self.synthesize(z, None, Some(k_max))?.activations)
    }

    pub fn block_activations(&self, c: &LayerwiseLatent, k_max: usize) -> Result<Vec<Tensor>> {
        self.check_layerwise(c)?;
        self.block_activations_batch(&c.to_tensors(self.dtype)?, k_max)
    }

    /// Sum of squared ModRes filter weights, optionally restricted to one path.
    pub fn modres_l2(&self, path: Option<ModResPath>) -> Result<Tensor> {
        let mut total = Tensor::zeros((), self.dtype, &nn::device())?;
        for (k, block) in self.modres.iter().enumerate() {
            if path.is_none_or(|p| p == self.modres_path(k)) {
                total = (total + block.l2()?)?;
            }
        }
        Ok(total)
    }

    /// Overwrites a named parameter (see [`Parameters::named_params`]).
    pub fn set_param(&self, name: &str, value: &Tensor) -> Result<()> {
        let params = self.named_params("");
        let Some((_, var)) = params.iter().find(|(n, _)| n == name) else {
            return validation(format!("no generator parameter named {name}"));
        };
        if var.dims() != value.dims() {
            return validation(format!("{name}: shape {:?} != {:?}", value.dims(), var.dims()));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn same_architecture(&self, other: &GeneratorModel) -> bool {
        self.config == other.config
            && self.mapping.depth() == other.mapping.depth()
            && self.modres.iter().zip(&other.modres).all(|(a, b)| a.kernel() == b.kernel())
    }
}

impl Parameters for GeneratorModel {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        self.visit_intrinsic(prefix, f);
        for (k, m) in self.modres.iter().enumerate() {
            m.visit_params(&join(prefix, &format!("modres.{k}")), f);
        }
    }
}
