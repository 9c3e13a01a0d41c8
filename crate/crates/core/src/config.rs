//! Run configuration. One TOML file drives training, evaluation and serving;
//! unknown keys are rejected at load.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{io_err, Error, Result};

/// Environment variable consulted when no `--config` path is given.
pub const CONFIG_ENV: &str = "STYLEFUSE_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub extrinsic: ExtrinsicConfig,
    pub frozen: FrozenSeeds,
    pub losses: LossConfig,
    pub train: TrainConfig,
    pub paths: PathConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Side length of generated and ingested images.
    pub resolution: usize,
    pub d_latent: usize,
    /// Number of synthesis layers L; the style weight vector has this length.
    pub n_layers: usize,
    pub mapping_depth: usize,
    pub max_channels: usize,
    pub min_channels: usize,
    /// Kernel size of the residual convolutions in each modulated residual block.
    pub modres_kernel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSeeds {
    pub sg: u64,
    pub enc1: u64,
    pub enc2: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtrinsicConfig {
    pub gamma1: f64,
    pub gamma2: f64,
    pub encoder_seeds: EncoderSeeds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrozenSeeds {
    pub perceptual: u64,
    pub embedder: u64,
    pub segmenter: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegSign {
    /// `loss_id - alpha_seg * loss_seg`
    Subtractive,
    /// `loss_id + alpha_seg * loss_seg`
    Restorative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Number of coarse blocks compared by the structural loss (K).
    pub structural_blocks: usize,
    pub alpha_pl: f64,
    pub alpha_adv: f64,
    pub alpha_seg: f64,
    pub seg_sign: SegSign,
    pub offset_iterations: usize,
    pub offset_lr: f64,
    /// Manipulation intensity used by the offset pre-pass.
    pub sigma: f64,
    pub content_weight: f64,
    pub style_weight: f64,
    pub identity_weight: f64,
    pub modres_l2_weight: f64,
    pub contextual_bandwidth: f64,
    pub non_saturating: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied to `learning_rate` for the Adam optimizers.
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub disc_lr_scale: f64,
    pub batch_size: usize,
    pub intrinsic_iterations: usize,
    /// `(layer, iterations)` passes, run in list order with non-increasing layer.
    pub stage2_layers: Vec<(usize, usize)>,
    pub stage3_iterations: usize,
    pub style_reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathConfig {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            extrinsic: ExtrinsicConfig::default(),
            frozen: FrozenSeeds::default(),
            losses: LossConfig::default(),
            train: TrainConfig::default(),
            paths: PathConfig::default(),
        }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            d_latent: 64,
            n_layers: 8,
            mapping_depth: 2,
            max_channels: 32,
            min_channels: 16,
            modres_kernel: 3,
        }
    }
}

impl Default for ExtrinsicConfig {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1.0,
            encoder_seeds: EncoderSeeds {
                sg: 101,
                enc1: 102,
                enc2: 103,
            },
        }
    }
}

impl Default for FrozenSeeds {
    fn default() -> Self {
        Self {
            perceptual: 201,
            embedder: 202,
            segmenter: 203,
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            structural_blocks: 2,
            alpha_pl: 1.0,
            alpha_adv: 0.05,
            alpha_seg: 0.2,
            seg_sign: SegSign::Subtractive,
            offset_iterations: 10,
            offset_lr: 0.05,
            sigma: 1.0,
            content_weight: 1.0,
            style_weight: 1.0,
            identity_weight: 1.0,
            modres_l2_weight: 1e-3,
            contextual_bandwidth: 0.5,
            non_saturating: false,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            lr_scale: 0.01,
            beta1: 0.5,
            beta2: 0.999,
            disc_lr_scale: 1.0,
            batch_size: 4,
            intrinsic_iterations: 50,
            stage2_layers: vec![(5, 50), (4, 50), (3, 200)],
            stage3_iterations: 50,
            style_reference: 0,
        }
    }
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// The full-size setting: 18 synthesis layers at 1024x1024, inputs at
    /// 256x256, and the 7/6/5 layer passes with 200/200/2000 iterations.
    pub fn full_scale() -> Self {
        let mut cfg = Self::default();
        cfg.model = ModelConfig {
            resolution: 1024,
            d_latent: 512,
            n_layers: 18,
            mapping_depth: 8,
            max_channels: 512,
            min_channels: 32,
            modres_kernel: 3,
        };
        cfg.train.stage2_layers = vec![(7, 200), (6, 200), (5, 2000)];
        cfg
    }

    /// Resolution full-size inputs are resized to before encoding.
    pub const ENCODER_INPUT_RESOLUTION: usize = 256;

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml_str(&text)
    }

    /// Explicit path first, then the environment variable.
    pub fn resolve_path(explicit: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.to_path_buf());
        }
        std::env::var_os(CONFIG_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| Error::Config(format!("no config path given and {CONFIG_ENV} is unset")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let m = &self.model;
        if m.resolution < 4 || !m.resolution.is_power_of_two() {
            return bad(format!("model.resolution {} must be a power of two >= 4", m.resolution));
        }
        if m.n_layers == 0 {
            return bad("model.n_layers must be positive".into());
        }
        if crate::generator::layer_resolution(m.n_layers - 1, m.resolution) != m.resolution {
            return bad(format!(
                "model.n_layers {} cannot reach resolution {}",
                m.n_layers, m.resolution
            ));
        }
        if m.d_latent == 0 || m.mapping_depth == 0 {
            return bad("model.d_latent and model.mapping_depth must be positive".into());
        }
        if m.min_channels == 0 || m.min_channels > m.max_channels {
            return bad("model channel bounds must satisfy 0 < min_channels <= max_channels".into());
        }
        if m.modres_kernel % 2 == 0 {
            return bad("model.modres_kernel must be odd".into());
        }
        for (name, g) in [("gamma1", self.extrinsic.gamma1), ("gamma2", self.extrinsic.gamma2)] {
            if !(0.0..=1.0).contains(&g) {
                return bad(format!("extrinsic.{name} = {g} outside [0, 1]"));
            }
        }
        let l = &self.losses;
        if l.structural_blocks == 0 || l.structural_blocks > m.n_layers {
            return bad(format!("losses.structural_blocks must lie in 1..={}", m.n_layers));
        }
        let weights = [
            ("alpha_pl", l.alpha_pl),
            ("alpha_adv", l.alpha_adv),
            ("alpha_seg", l.alpha_seg),
            ("content_weight", l.content_weight),
            ("style_weight", l.style_weight),
            ("identity_weight", l.identity_weight),
            ("modres_l2_weight", l.modres_l2_weight),
        ];
        for (name, w) in weights {
            if !w.is_finite() || w < 0.0 {
                return bad(format!("losses.{name} = {w} must be finite and non-negative"));
            }
        }
        if l.offset_iterations == 0 {
            return bad("losses.offset_iterations must be at least 1".into());
        }
        if !(l.contextual_bandwidth > 0.0) || !l.sigma.is_finite() || !(l.offset_lr > 0.0) {
            return bad("losses.contextual_bandwidth and offset_lr must be positive; sigma finite".into());
        }
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.lr_scale > 0.0 && t.disc_lr_scale > 0.0) {
            return bad("train learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return bad("train.beta1/beta2 must lie in [0, 1)".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        crate::trainer::validate_layer_schedule(&t.stage2_layers, m.n_layers)?;
        Ok(())
    }

    /// Adam step size actually used by the trainers.
    pub fn effective_lr(&self) -> f64 {
        self.train.learning_rate * self.train.lr_scale
    }
}
