//! Everything a trained run consists of, and inference on it.

use std::fmt;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{validation, Result};
use crate::extrinsic::{resolve_input, synthesize_full_batch, ExtrinsicPath, Gates, SynthesisInput};
use crate::generator::{GeneratorModel, GeneratorRole, StyleWeightVector};
use crate::image_pipeline::ImageTensor;
use crate::losses::Discriminator;
use crate::nn::Parameters;
use crate::semantics::{self, SemanticDirection};
use crate::surrogate::FrozenNets;

/// Curriculum progress marker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    /// Freshly constructed; nothing trained.
    Pretrained,
    I,
    II,
    III,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Pretrained => "pretrained",
            Stage::I => "I",
            Stage::II => "II",
            Stage::III => "III",
        };
        f.write_str(s)
    }
}

/// Per-request inference controls.
#[derive(Debug, Clone, PartialEq)]
pub struct StylizeParams {
    pub weights: StyleWeightVector,
    /// Intensity of the latent edit along `direction_rank`; 0 disables it.
    pub sigma: f64,
    pub gates: Gates,
    pub direction_rank: Option<usize>,
}

impl StylizeParams {
    pub fn new(weights: StyleWeightVector) -> Self {
        Self {
            weights,
            sigma: 0.0,
            gates: Gates::default(),
            direction_rank: None,
        }
    }
}

/// Generators, extrinsic path and discriminator of one run.
#[derive(Debug)]
pub struct StyleModel {
    pub config: RunConfig,
    /// Frozen copy of the generator before any fine-tuning.
    pub base: GeneratorModel,
    pub generator: GeneratorModel,
    pub path: ExtrinsicPath,
    pub discriminator: Discriminator,
    pub stage: Stage,
    pub iteration: usize,
    /// Direction offset refined before the last stage, if it ran.
    pub offset: Option<Vec<f64>>,
}

impl StyleModel {
    pub fn new(config: &RunConfig, dtype: DType) -> Result<Self> {
        config.validate()?;
        let base = GeneratorModel::new(&config.model, config.seed, dtype)?;
        let generator = base.deep_clone(GeneratorRole::Transfer)?;
        Ok(Self {
            config: config.clone(),
            base,
            generator,
            path: ExtrinsicPath::new(&config.model, &config.extrinsic, config.seed, dtype)?,
            discriminator: Discriminator::new(config.model.resolution, config.seed, dtype)?,
            stage: Stage::Pretrained,
            iteration: 0,
            offset: None,
        })
    }

    pub fn dtype(&self) -> DType {
        self.generator.dtype()
    }

    pub fn n_layers(&self) -> usize {
        self.generator.n_layers()
    }

    pub fn frozen_nets(&self) -> Result<FrozenNets> {
        FrozenNets::new(&self.config.frozen, self.dtype())
    }

    /// Every trainable tensor, under stable names.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let mut push = |name: String, v: &candle_core::Var| out.push((name, v.as_tensor().clone()));
        self.base.visit_params("base", &mut push);
        self.generator.visit_params("generator", &mut push);
        self.path.visit_params("extrinsic", &mut push);
        self.discriminator.visit_params("discriminator", &mut push);
        out
    }

    /// Overwrites every trainable tensor from `tensors`, which must name each
    /// one exactly once with a matching shape.
    pub fn load_tensors(&self, tensors: &[(String, Tensor)]) -> Result<()> {
        let mut targets = Vec::new();
        let mut push = |name: String, v: &candle_core::Var| targets.push((name, v.clone()));
        self.base.visit_params("base", &mut push);
        self.generator.visit_params("generator", &mut push);
        self.path.visit_params("extrinsic", &mut push);
        self.discriminator.visit_params("discriminator", &mut push);
        if targets.len() != tensors.len() {
            return validation(format!("expected {} tensors, got {}", targets.len(), tensors.len()));
        }
        for (name, var) in &targets {
            let Some((_, t)) = tensors.iter().find(|(n, _)| n == name) else {
                return validation(format!("missing tensor {name}"));
            };
            if t.dims() != var.dims() || t.dtype() != var.dtype() {
                return validation(format!(
                    "{name}: stored {:?}/{:?}, model expects {:?}/{:?}",
                    t.dims(),
                    t.dtype(),
                    var.dims(),
                    var.dtype()
                ));
            }
            var.set(t)?;
        }
        Ok(())
    }

    pub fn directions(&self, top_n: usize) -> Result<Vec<SemanticDirection>> {
        semantics::factorize(self.generator.mapping(), top_n)
    }

    /// Stylizes `content`, taking extrinsic style from `style` when given and
    /// from `content` otherwise.
    pub fn stylize(&self, content: &ImageTensor, style: Option<&ImageTensor>, params: &StylizeParams) -> Result<ImageTensor> {
        let res = self.config.model.resolution;
        for img in std::iter::once(content).chain(style) {
            if img.size() != res {
                return validation(format!("image is {0}x{0}, model expects {res}x{res}", img.size()));
            }
        }
        if params.weights.len() != self.n_layers() {
            return validation(format!(
                "style weight vector has {} entries, model has {} layers",
                params.weights.len(),
                self.n_layers()
            ));
        }
        if !params.sigma.is_finite() {
            return validation(format!("sigma must be finite, got {}", params.sigma));
        }
        let input = match style {
            Some(style) => SynthesisInput::Images { content, style },
            None => SynthesisInput::Image(content),
        };
        let (mut latents, code1, code2) = resolve_input(&self.generator, &self.path, &input)?;
        if params.sigma != 0.0 {
            let rank = params.direction_rank.unwrap_or(0);
            let d = self.generator.d_latent();
            if rank >= d {
                return validation(format!("direction_rank {rank} must be below {d}"));
            }
            let dir = self.directions(rank + 1)?.pop().expect("rank + 1 directions");
            let shift = (Tensor::from_slice(&dir.vector, (1, d), &crate::nn::device())?.to_dtype(self.dtype())? * params.sigma)?;
            latents = latents.iter().map(|z| z.broadcast_add(&shift)).collect::<candle_core::Result<_>>()?;
        }
        ImageTensor::from_tensor(&synthesize_full_batch(
            &self.generator,
            &self.path,
            &latents,
            &code1,
            &code2,
            &params.weights,
            params.gates,
        )?)
    }

    /// Intrinsic-path rendering of the input's content latent.
    pub fn intrinsic(&self, content: &ImageTensor) -> Result<ImageTensor> {
        let latent = crate::extrinsic::content_latent(&self.generator, &self.path, &SynthesisInput::Image(content))?;
        self.generator.synthesize_intrinsic(&latent)
    }

    /// Fingerprint of everything that must stay frozen during training.
    pub fn frozen_fingerprint(&self, nets: &FrozenNets) -> Result<String> {
        Ok(format!("{}|{}", self.path.encoder_fingerprint()?, nets.fingerprint()?))
    }
}
