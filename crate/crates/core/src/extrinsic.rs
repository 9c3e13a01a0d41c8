//! Extrinsic style path: frozen style encoders, one gated mapping unit per
//! encoder, and the dual-path synthesis `G(enc1(I), enc2(I), W)`.

use candle_core::{DType, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::{ExtrinsicConfig, ModelConfig};
use crate::error::{validation, Result};
use crate::generator::{ExtrinsicStyles, GeneratorModel, LatentCode, LayerwiseLatent, StyleWeightVector};
use crate::image_pipeline::ImageTensor;
use crate::nn::{self, join, Affine, Parameters};
use crate::surrogate::{EncoderTag, SurrogateEncoder};

/// Two affine domain branches blended by a gate:
/// `F_d = gamma * branch0(F_t) + (1 - gamma) * branch1(F_t)`.
#[derive(Debug)]
pub struct GatedMappingUnit {
    branch0: Affine,
    branch1: Affine,
    gamma: f64,
}

pub fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return validation(format!("gate gamma = {gamma} outside [0, 1]"));
    }
    Ok(())
}

impl GatedMappingUnit {
    pub fn new(rng: &mut ChaCha8Rng, d: usize, gamma: f64, dtype: DType) -> Result<Self> {
        check_gamma(gamma)?;
        Ok(Self {
            branch0: Affine::new(rng, d, d, 0.0, dtype)?,
            branch1: Affine::new(rng, d, d, 0.0, dtype)?,
            gamma,
        })
    }

    pub fn from_branches(branch0: Affine, branch1: Affine, gamma: f64) -> Result<Self> {
        check_gamma(gamma)?;
        if branch0.weight.dims() != branch1.weight.dims() || branch0.d_in() != branch0.d_out() {
            return validation("GMU branches must be square and share dimensions");
        }
        Ok(Self { branch0, branch1, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        check_gamma(gamma)?;
        self.gamma = gamma;
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.branch0.d_in()
    }

    /// Blends on `[N, d]` rows; `gamma` overrides the configured gate.
    pub fn forward(&self, ft: &Tensor, gamma: Option<f64>) -> Result<Tensor> {
        let g = gamma.unwrap_or(self.gamma);
        check_gamma(g)?;
        // Endpoints return a single branch so they match it exactly.
        if g == 1.0 {
            return self.branch0.forward(ft);
        }
        if g == 0.0 {
            return self.branch1.forward(ft);
        }
        Ok(((self.branch0.forward(ft)? * g)? + (self.branch1.forward(ft)? * (1.0 - g))?)?)
    }

    pub fn forward_code(&self, ft: &LatentCode) -> Result<LatentCode> {
        if ft.dim() != self.dim() {
            return validation(format!("GMU input has {} entries, expects {}", ft.dim(), self.dim()));
        }
        LatentCode::from_tensor(&self.forward(&ft.to_tensor(self.branch0.weight.dtype())?, None)?)
    }

    fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            branch0: self.branch0.deep_clone()?,
            branch1: self.branch1.deep_clone()?,
            gamma: self.gamma,
        })
    }
}

impl Parameters for GatedMappingUnit {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        self.branch0.visit_params(&join(prefix, "branch0"), f);
        self.branch1.visit_params(&join(prefix, "branch1"), f);
    }
}

/// The three frozen encoders and the two gates.
#[derive(Debug)]
pub struct ExtrinsicPath {
    pub enc_sg: SurrogateEncoder,
    pub enc1: SurrogateEncoder,
    pub enc2: SurrogateEncoder,
    pub gmu1: GatedMappingUnit,
    pub gmu2: GatedMappingUnit,
}

impl ExtrinsicPath {
    pub fn new(model: &ModelConfig, cfg: &ExtrinsicConfig, seed: u64, dtype: DType) -> Result<Self> {
        let (res, d) = (model.resolution, model.d_latent);
        let seeds = &cfg.encoder_seeds;
        let mut rng = nn::rng_for(seed, "gmu");
        Ok(Self {
            enc_sg: SurrogateEncoder::new(EncoderTag::Sg, seeds.sg, res, d, dtype)?,
            enc1: SurrogateEncoder::new(EncoderTag::Enc1, seeds.enc1, res, d, dtype)?,
            enc2: SurrogateEncoder::new(EncoderTag::Enc2, seeds.enc2, res, d, dtype)?,
            gmu1: GatedMappingUnit::new(&mut rng, d, cfg.gamma1, dtype)?,
            gmu2: GatedMappingUnit::new(&mut rng, d, cfg.gamma2, dtype)?,
        })
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            enc_sg: self.enc_sg.clone(),
            enc1: self.enc1.clone(),
            enc2: self.enc2.clone(),
            gmu1: self.gmu1.deep_clone()?,
            gmu2: self.gmu2.deep_clone()?,
        })
    }

    pub fn encoder_fingerprint(&self) -> Result<String> {
        Ok(format!(
            "{}:{}:{}",
            self.enc_sg.fingerprint()?,
            self.enc1.fingerprint()?,
            self.enc2.fingerprint()?
        ))
    }
}

impl Parameters for ExtrinsicPath {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        self.gmu1.visit_params(&join(prefix, "gmu1"), f);
        self.gmu2.visit_params(&join(prefix, "gmu2"), f);
    }
}

/// Gate overrides for a single request.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Gates {
    pub gamma1: Option<f64>,
    pub gamma2: Option<f64>,
}

/// GMU outputs for the two encoders, as `[N, d]` rows, plus the number of
/// coarse layers fed by the second encoder.
pub struct ExtrinsicStyleCode {
    pub fine: Tensor,
    pub coarse: Tensor,
    pub coarse_layers: usize,
}

impl ExtrinsicStyleCode {
    pub fn per_layer(&self, n_layers: usize) -> Vec<Tensor> {
        (0..n_layers)
            .map(|k| if k < self.coarse_layers { self.coarse.clone() } else { self.fine.clone() })
            .collect()
    }
}

/// Maps raw encoder-space codes through the (detached) mapping network and
/// the two gates.
pub fn extrinsic_codes(
    gen: &GeneratorModel,
    path: &ExtrinsicPath,
    code1: &Tensor,
    code2: &Tensor,
    gates: Gates,
) -> Result<ExtrinsicStyleCode> {
    let d = gen.d_latent();
    for c in [code1, code2] {
        if c.rank() != 2 || c.dims()[1] != d {
            return validation(format!("extrinsic code shape {:?}, expected [N, {d}]", c.dims()));
        }
    }
    if path.gmu1.dim() != d || path.gmu2.dim() != d {
        return validation("GMU dimension does not match the generator latent size");
    }
    let ft1 = gen.mapping().forward(code1)?.detach();
    let ft2 = gen.mapping().forward(code2)?.detach();
    Ok(ExtrinsicStyleCode {
        fine: path.gmu1.forward(&ft1, gates.gamma1)?,
        coarse: path.gmu2.forward(&ft2, gates.gamma2)?,
        coarse_layers: gen.coarse_layers(),
    })
}

/// What the dual-path generator is driven by.
pub enum SynthesisInput<'a> {
    /// Content and style both come from one portrait.
    Image(&'a ImageTensor),
    /// Content from one portrait, extrinsic style from a reference.
    Images { content: &'a ImageTensor, style: &'a ImageTensor },
    /// Explicit latents: intrinsic per-layer codes plus raw codes standing in
    /// for the two encoder outputs.
    Latent {
        content: &'a LayerwiseLatent,
        code1: &'a LatentCode,
        code2: &'a LatentCode,
    },
}

/// Batched dual-path synthesis on raw tensors. `content` holds per-layer
/// `[N, d]` latents; `code1`/`code2` are `[N, d]` encoder-space codes.
pub fn synthesize_full_batch(
    gen: &GeneratorModel,
    path: &ExtrinsicPath,
    content: &[Tensor],
    code1: &Tensor,
    code2: &Tensor,
    weights: &StyleWeightVector,
    gates: Gates,
) -> Result<Tensor> {
    if weights.len() != gen.n_layers() {
        return validation(format!(
            "style weight vector has {} entries, generator has {} layers",
            weights.len(),
            gen.n_layers()
        ));
    }
    let codes = extrinsic_codes(gen, path, code1, code2, gates)?.per_layer(gen.n_layers());
    let ext = ExtrinsicStyles { codes: &codes, weights };
    Ok(gen.synthesize(content, Some(&ext), None)?.image.expect("full pass renders an image"))
}

/// Per-layer activations of the dual-path generator (used for layer-locality
/// checks).
pub fn full_activations(
    gen: &GeneratorModel,
    path: &ExtrinsicPath,
    content: &[Tensor],
    code1: &Tensor,
    code2: &Tensor,
    weights: &StyleWeightVector,
) -> Result<Vec<Tensor>> {
    let codes = extrinsic_codes(gen, path, code1, code2, Gates::default())?.per_layer(gen.n_layers());
    let ext = ExtrinsicStyles { codes: &codes, weights };
    Ok(gen.synthesize(content, Some(&ext), None)?.activations)
}

/// Resolves an input into per-layer content latents and the two raw codes.
pub fn resolve_input(
    gen: &GeneratorModel,
    path: &ExtrinsicPath,
    input: &SynthesisInput<'_>,
) -> Result<(Vec<Tensor>, Tensor, Tensor)> {
    let dtype = gen.dtype();
    match input {
        SynthesisInput::Image(img) => resolve_input(gen, path, &SynthesisInput::Images { content: img, style: img }),
        SynthesisInput::Images { content, style } => {
            let z = path.enc_sg.encode_batch(&content.to_tensor(dtype)?)?;
            let s = style.to_tensor(dtype)?;
            Ok((vec![z; gen.n_layers()], path.enc1.encode_batch(&s)?, path.enc2.encode_batch(&s)?))
        }
        SynthesisInput::Latent { content, code1, code2 } => {
            gen.check_layerwise(content)?;
            for c in [code1, code2] {
                if c.dim() != gen.d_latent() {
                    return validation(format!("code has {} entries, expected {}", c.dim(), gen.d_latent()));
                }
            }
            Ok((content.to_tensors(dtype)?, code1.to_tensor(dtype)?, code2.to_tensor(dtype)?))
        }
    }
}

/// `G(enc1(I), enc2(I), W)`: intrinsic synthesis with every layer's residual
/// scaled by `W[layer]`. `W = 0` reproduces the intrinsic output exactly.
pub fn synthesize_full(
    gen: &GeneratorModel,
    path: &ExtrinsicPath,
    input: &SynthesisInput<'_>,
    weights: &StyleWeightVector,
    gates: Gates,
) -> Result<ImageTensor> {
    let (content, code1, code2) = resolve_input(gen, path, input)?;
    ImageTensor::from_tensor(&synthesize_full_batch(gen, path, &content, &code1, &code2, weights, gates)?)
}

/// The intrinsic latent an input resolves to (what `W = 0` renders).
pub fn content_latent(gen: &GeneratorModel, path: &ExtrinsicPath, input: &SynthesisInput<'_>) -> Result<LayerwiseLatent> {
    let (content, _, _) = resolve_input(gen, path, input)?;
    let per_layer = content.iter().map(LatentCode::from_tensor).collect::<Result<Vec<_>>>()?;
    let n = per_layer.len();
    LayerwiseLatent::new(per_layer, n)
}
