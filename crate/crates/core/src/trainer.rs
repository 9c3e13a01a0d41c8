//! Curriculum fine-tuning: intrinsic-path adaptation, residual
//! initialization (stage I), structure fusion on random latents (stage II) and
//! the full objective on data (stage III).

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::error::{io_err, validation, Error, Result};
use crate::extrinsic::{synthesize_full_batch, Gates};
use crate::generator::{GeneratorModel, ModResPath, StyleWeightVector};
use crate::image_pipeline::{ImageDataset, ImageTensor};
use crate::losses::{self, structural_loss, StructuralLossConfig};
use crate::model::{Stage, StyleModel};
use crate::nn::{self, Parameters};
use crate::semantics::{self, MapNetLossConfig, OffsetProblem, OffsetResult};
use crate::surrogate::FrozenNets;

/// Checks a `(layer, iterations)` schedule: layers within `1..=n_layers`,
/// positive iteration counts, non-increasing layer order.
pub fn validate_layer_schedule(schedule: &[(usize, usize)], n_layers: usize) -> Result<()> {
    if schedule.is_empty() {
        return Err(Error::Config("layer schedule is empty".into()));
    }
    for &(layer, iters) in schedule {
        if layer < 1 || layer > n_layers {
            return Err(Error::Config(format!("schedule layer {layer} outside 1..={n_layers}")));
        }
        if iters == 0 {
            return Err(Error::Config(format!("schedule layer {layer} has zero iterations")));
        }
    }
    if schedule.windows(2).any(|w| w[1].0 > w[0].0) {
        return Err(Error::Config(format!("layer schedule {schedule:?} must not increase")));
    }
    Ok(())
}

/// Weights of the perceptual and adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageLossWeights {
    pub alpha_pl: f64,
    pub alpha_adv: f64,
}

impl StageLossWeights {
    pub fn new(alpha_pl: f64, alpha_adv: f64) -> Result<Self> {
        for (name, v) in [("alpha_pl", alpha_pl), ("alpha_adv", alpha_adv)] {
            if !v.is_finite() || v < 0.0 {
                return validation(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(Self { alpha_pl, alpha_adv })
    }

    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::new(cfg.losses.alpha_pl, cfg.losses.alpha_adv)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSchedule {
    pub stage: Stage,
    /// `(layer, iterations)` passes; stages other than II use one pass whose
    /// layer is ignored.
    pub layer_schedule: Vec<(usize, usize)>,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl StageSchedule {
    pub fn intrinsic(cfg: &RunConfig) -> Self {
        Self::single(cfg, Stage::I, cfg.train.intrinsic_iterations)
    }

    pub fn stage2(cfg: &RunConfig) -> Self {
        Self {
            stage: Stage::II,
            layer_schedule: cfg.train.stage2_layers.clone(),
            learning_rate: cfg.effective_lr(),
            batch_size: cfg.train.batch_size,
        }
    }

    pub fn stage3(cfg: &RunConfig) -> Self {
        Self::single(cfg, Stage::III, cfg.train.stage3_iterations)
    }

    fn single(cfg: &RunConfig, stage: Stage, iterations: usize) -> Self {
        Self {
            stage,
            layer_schedule: vec![(cfg.model.n_layers, iterations)],
            learning_rate: cfg.effective_lr(),
            batch_size: cfg.train.batch_size,
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.layer_schedule.iter().map(|p| p.1).sum()
    }

    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return validation(format!("learning rate {} must be positive", self.learning_rate));
        }
        if self.batch_size == 0 {
            return validation("batch size must be positive");
        }
        if self.stage == Stage::II {
            validate_layer_schedule(&self.layer_schedule, n_layers)?;
        }
        Ok(())
    }
}

/// One training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub stage: Stage,
    pub loss_name: String,
    pub value: f64,
}

/// Loss log, optionally mirrored line by line to a JSON-lines file.
#[derive(Debug, Default)]
pub struct TrainingLog {
    rows: Vec<LogRow>,
    sink: Option<BufWriter<File>>,
}

impl TrainingLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends to `path`, creating it if needed.
    pub fn with_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::options().create(true).append(true).open(path).map_err(io_err(path))?;
        Ok(Self {
            rows: Vec::new(),
            sink: Some(BufWriter::new(file)),
        })
    }

    pub fn push(&mut self, step: usize, stage: Stage, loss_name: &str, value: f64) -> Result<()> {
        let row = LogRow {
            step,
            stage,
            loss_name: loss_name.to_string(),
            value,
        };
        if let Some(sink) = &mut self.sink {
            let line = serde_json::to_string(&row).expect("log row serializes");
            writeln!(sink, "{line}").and_then(|_| sink.flush()).map_err(|e| Error::Io {
                path: PathBuf::from("<training log>"),
                source: e,
            })?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn values(&self, stage: Stage, loss_name: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.stage == stage && r.loss_name == loss_name)
            .map(|r| r.value)
            .collect()
    }

    pub fn to_jsonl(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("log row serializes") + "\n")
            .collect()
    }
}

/// Trailing moving average; the first entries average what is available.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (i, v) in values.iter().enumerate() {
        sum += v;
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}

/// Per-step totals of one stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageReport {
    /// Weighted generator objective per step.
    pub totals: Vec<f64>,
    /// Discriminator loss per step.
    pub discriminator: Vec<f64>,
    /// Offset refinement run before the stage, if any.
    pub offset: Option<OffsetResult>,
}

impl StageReport {
    /// Mean of the first and of the last `window` totals.
    pub fn start_end(&self, window: usize) -> Option<(f64, f64)> {
        let n = self.totals.len();
        if n == 0 {
            return None;
        }
        let w = window.clamp(1, n);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        Some((mean(&self.totals[..w]), mean(&self.totals[n - w..])))
    }
}

/// Zeroes the residual filters fed by the first encoder and sets those fed by
/// the second to identity-preserving values. Afterwards every residual is
/// exactly zero, whatever the style weights.
pub fn stage1_initialize(gen: &GeneratorModel) -> Result<()> {
    for (k, block) in gen.modres_blocks().iter().enumerate() {
        match gen.modres_path(k) {
            ModResPath::Enc1 => block.zero_filters()?,
            ModResPath::Enc2 => block.identity_filters()?,
        }
    }
    Ok(())
}

fn adam(vars: Vec<Var>, lr: f64, cfg: &RunConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            beta1: cfg.train.beta1,
            beta2: cfg.train.beta2,
            eps: 1e-8,
            weight_decay: 0.0,
        },
    )?)
}

fn random_latents(rng: &mut ChaCha8Rng, n: usize, d: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(v, (n, d), &nn::device())?.to_dtype(dtype)?)
}

/// Deterministic reshuffling batch iterator over a dataset.
struct Batches<'a> {
    data: &'a ImageDataset,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Batches<'a> {
    fn new(data: &'a ImageDataset) -> Self {
        Self {
            data,
            order: (0..data.len()).collect(),
            pos: data.len(),
        }
    }

    fn next(&mut self, rng: &mut ChaCha8Rng, n: usize, dtype: DType) -> Result<Tensor> {
        let mut picked: Vec<&ImageTensor> = Vec::with_capacity(n);
        while picked.len() < n {
            if self.pos == self.order.len() {
                self.order.shuffle(rng);
                self.pos = 0;
            }
            picked.push(&self.data.items()[self.order[self.pos]]);
            self.pos += 1;
        }
        ImageTensor::batch(&picked, dtype)
    }
}

/// Runs curriculum stages against one model.
pub struct Trainer<'m> {
    pub model: &'m mut StyleModel,
    pub log: TrainingLog,
    frozen: FrozenNets,
    divergence_checkpoint: Option<PathBuf>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut StyleModel, log: TrainingLog) -> Result<Self> {
        let frozen = model.frozen_nets()?;
        Ok(Self {
            model,
            log,
            frozen,
            divergence_checkpoint: None,
        })
    }

    /// Where to save the model if a stage diverges.
    pub fn with_divergence_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.divergence_checkpoint = Some(path.into());
        self
    }

    pub fn frozen(&self) -> &FrozenNets {
        &self.frozen
    }

    fn config(&self) -> &RunConfig {
        &self.model.config
    }

    fn require(&self, requested: Stage, required: Stage) -> Result<()> {
        if self.model.stage < required {
            return Err(Error::StageOrder {
                requested: requested.to_string(),
                required: required.to_string(),
                found: self.model.stage.to_string(),
            });
        }
        Ok(())
    }

    fn diverged(&self, stage: Stage, step: usize, what: &str, value: f64, totals: &[f64]) -> Error {
        let checkpoint = self.divergence_checkpoint.as_ref().and_then(|p| match save_checkpoint(&*self.model, p) {
            Ok(()) => Some(p.clone()),
            Err(e) => {
                log::error!("could not save divergence checkpoint: {e}");
                None
            }
        });
        let mut trajectory = totals.to_vec();
        trajectory.push(value);
        Error::Divergence {
            stage: stage.to_string(),
            step,
            message: format!("non-finite {what} loss {value}"),
            trajectory,
            checkpoint,
        }
    }

    fn check_frozen(&self, before: &str) -> Result<()> {
        if self.model.frozen_fingerprint(&self.frozen)? != before {
            return Err(Error::Integrity("a frozen network changed during training".into()));
        }
        Ok(())
    }

    fn discriminator_step(&mut self, opt: &mut AdamW, fake: &Tensor, real: &Tensor) -> Result<f64> {
        let cfg = &self.model.config.losses;
        let terms = losses::adversarial_loss(&self.model.discriminator, &fake.detach(), &real.detach(), cfg.non_saturating)?;
        let value = nn::scalar(&terms.discriminator)?;
        if value.is_finite() {
            opt.backward_step(&terms.discriminator)?;
        }
        Ok(value)
    }

    fn disc_optimizer(&self) -> Result<AdamW> {
        let cfg = self.config();
        adam(self.model.discriminator.vars(), cfg.effective_lr() * cfg.train.disc_lr_scale, cfg)
    }

    /// Fine-tunes the intrinsic generator with the structural loss against
    /// the frozen base copy plus the adversarial loss on `data`.
    pub fn train_intrinsic(&mut self, data: &ImageDataset, schedule: &StageSchedule) -> Result<StageReport> {
        schedule.validate(self.model.n_layers())?;
        self.check_data(data)?;
        let fingerprint = self.model.frozen_fingerprint(&self.frozen)?;
        let cfg = self.config().clone();
        let dtype = self.model.dtype();
        let (d, layers, b) = (self.model.generator.d_latent(), self.model.n_layers(), schedule.batch_size);
        let structural_cfg = StructuralLossConfig {
            blocks: cfg.losses.structural_blocks,
        };
        let mut rng = nn::rng_for(cfg.seed, "train-intrinsic");
        let mut g_opt = adam(self.model.generator.intrinsic_vars(), schedule.learning_rate, &cfg)?;
        let mut d_opt = self.disc_optimizer()?;
        let mut batches = Batches::new(data);
        let mut report = StageReport::default();
        for step in 0..schedule.total_iterations() {
            let z = random_latents(&mut rng, b, d, dtype)?;
            let latents = vec![z; layers];
            let real = batches.next(&mut rng, b, dtype)?;
            let fake = self.model.generator.synthesize_intrinsic_batch(&latents)?;
            let structural = structural_loss(&self.model.base, &self.model.generator, &latents, structural_cfg)?;
            let adv = losses::adversarial_loss(&self.model.discriminator, &fake, &real, cfg.losses.non_saturating)?;
            let total = (&structural + &adv.generator)?;
            let value = nn::scalar(&total)?;
            if !value.is_finite() {
                return Err(self.diverged(Stage::I, step, "intrinsic", value, &report.totals));
            }
            self.log.push(step, Stage::I, "structural", nn::scalar(&structural)?)?;
            self.log.push(step, Stage::I, "adversarial", nn::scalar(&adv.generator)?)?;
            report.totals.push(value);
            g_opt.backward_step(&total)?;
            report.discriminator.push(self.discriminator_step(&mut d_opt, &fake, &real)?);
            self.model.iteration += 1;
        }
        self.check_frozen(&fingerprint)?;
        Ok(report)
    }

    /// Stage I: intrinsic adaptation followed by residual initialization.
    pub fn stage1(&mut self, data: &ImageDataset) -> Result<StageReport> {
        let schedule = StageSchedule::intrinsic(self.config());
        let report = self.train_intrinsic(data, &schedule)?;
        stage1_initialize(&self.model.generator)?;
        self.model.stage = Stage::I;
        Ok(report)
    }

    /// Stage II: for each `(layer, iterations)` pass, pull the dual-path
    /// output for random codes toward the intrinsic rendering of the mixed
    /// latent that switches to the second code from `layer` on.
    pub fn stage2(&mut self, schedule: &StageSchedule, weights: StageLossWeights) -> Result<StageReport> {
        self.require(Stage::II, Stage::I)?;
        schedule.validate(self.model.n_layers())?;
        let fingerprint = self.model.frozen_fingerprint(&self.frozen)?;
        let cfg = self.config().clone();
        let dtype = self.model.dtype();
        let (d, layers, b) = (self.model.generator.d_latent(), self.model.n_layers(), schedule.batch_size);
        let ones = StyleWeightVector::ones(layers);
        let mut rng = nn::rng_for(cfg.seed, "stage2");
        let mut vars = self.model.generator.modres_vars();
        vars.extend(self.model.path.vars());
        let mut g_opt = adam(vars, schedule.learning_rate, &cfg)?;
        let mut d_opt = self.disc_optimizer()?;
        let mut report = StageReport::default();
        let mut step = 0;
        for &(layer, iterations) in &schedule.layer_schedule {
            for _ in 0..iterations {
                let c1 = random_latents(&mut rng, b, d, dtype)?;
                let c2 = random_latents(&mut rng, b, d, dtype)?;
                // 1-based layers below `layer` keep c1, the rest take c2.
                let mixed: Vec<Tensor> = (1..=layers).map(|k| if k < layer { c1.clone() } else { c2.clone() }).collect();
                let target = self.model.generator.synthesize_intrinsic_batch(&mixed)?.detach();
                let content = vec![c1; layers];
                let fake = synthesize_full_batch(&self.model.generator, &self.model.path, &content, &c2, &c2, &ones, Gates::default())?;
                let pl = losses::perceptual_loss(&self.frozen.perceptual, &fake, &target)?;
                let adv = losses::adversarial_loss(&self.model.discriminator, &fake, &target, cfg.losses.non_saturating)?;
                let total = ((&pl * weights.alpha_pl)? + (&adv.generator * weights.alpha_adv)?)?;
                let value = nn::scalar(&total)?;
                if !value.is_finite() {
                    return Err(self.diverged(Stage::II, step, "stage II", value, &report.totals));
                }
                self.log.push(step, Stage::II, "perceptual", nn::scalar(&pl)?)?;
                self.log.push(step, Stage::II, "adversarial", nn::scalar(&adv.generator)?)?;
                report.totals.push(value);
                g_opt.backward_step(&total)?;
                report.discriminator.push(self.discriminator_step(&mut d_opt, &fake, &target)?);
                self.model.iteration += 1;
                step += 1;
            }
        }
        self.check_frozen(&fingerprint)?;
        self.model.stage = Stage::II;
        Ok(report)
    }

    /// Refines a direction offset on the base generator so that moving along
    /// it keeps identity (and, per `seg_sign`, trades off the mask term).
    pub fn offset_prepass(&mut self, data: &ImageDataset) -> Result<OffsetResult> {
        self.check_data(data)?;
        let cfg = self.config().clone();
        let dtype = self.model.dtype();
        let n = data.len().min(cfg.train.batch_size);
        let refs: Vec<&ImageTensor> = data.items().iter().take(n).collect();
        let anchors = self.model.path.enc_sg.encode_batch(&ImageTensor::batch(&refs, dtype)?)?.detach();
        let d = self.model.base.d_latent();
        let dirs = semantics::factorize(self.model.base.mapping(), d.min(2))?;
        let start = dirs[0].vector.clone();
        let traverse = dirs.get(1).unwrap_or(&dirs[0]).vector.clone();
        let problem = OffsetProblem::with_anchors(
            &self.model.base,
            &self.frozen.embedder,
            &self.frozen.segmenter,
            cfg.losses.sigma,
            &traverse,
            anchors,
        )?;
        let result = semantics::optimize_offset(&problem, &MapNetLossConfig::from(&cfg.losses), &start)?;
        self.model.offset = Some(result.offset.clone());
        Ok(result)
    }

    /// Stage III: content, style, perceptual, adversarial, identity and
    /// residual-regularization terms on data batches, preceded by the offset
    /// refinement.
    pub fn stage3(&mut self, data: &ImageDataset, schedule: &StageSchedule, weights: StageLossWeights) -> Result<StageReport> {
        self.require(Stage::III, Stage::II)?;
        schedule.validate(self.model.n_layers())?;
        self.check_data(data)?;
        let cfg = self.config().clone();
        if cfg.train.style_reference >= data.len() {
            return validation(format!(
                "style_reference {} outside the {}-image dataset",
                cfg.train.style_reference,
                data.len()
            ));
        }
        let offset = self.offset_prepass(data)?;
        let fingerprint = self.model.frozen_fingerprint(&self.frozen)?;
        let dtype = self.model.dtype();
        let (layers, b) = (self.model.n_layers(), schedule.batch_size);
        let ones = StyleWeightVector::ones(layers);
        let l = &cfg.losses;
        let style_ref = data.items()[cfg.train.style_reference].to_tensor(dtype)?;
        let style_batch = style_ref.repeat((b, 1, 1, 1))?;
        let shift = match &self.model.offset {
            Some(v) => Some((Tensor::from_slice(v, (1, v.len()), &nn::device())?.to_dtype(dtype)? * l.sigma)?),
            None => None,
        };
        let mut rng = nn::rng_for(cfg.seed, "stage3");
        let mut vars = self.model.generator.modres_vars();
        vars.extend(self.model.path.vars());
        let mut g_opt = adam(vars, schedule.learning_rate, &cfg)?;
        let mut d_opt = self.disc_optimizer()?;
        let mut batches = Batches::new(data);
        let mut report = StageReport {
            offset: Some(offset),
            ..StageReport::default()
        };
        for step in 0..schedule.total_iterations() {
            let x = batches.next(&mut rng, b, dtype)?;
            let path = &self.model.path;
            let gen = &self.model.generator;
            let c = path.enc_sg.encode_batch(&x)?.detach();
            let latents = vec![c.clone(); layers];
            let out = synthesize_full_batch(gen, path, &latents, &path.enc1.encode_batch(&x)?, &path.enc2.encode_batch(&x)?, &ones, Gates::default())?;
            let intrinsic = gen.synthesize_intrinsic_batch(&latents)?.detach();
            let id_target = match &shift {
                Some(s) => gen.synthesize_intrinsic_batch(&vec![c.broadcast_add(s)?; layers])?.detach(),
                None => intrinsic.clone(),
            };
            let net = &self.frozen.perceptual;
            let content = losses::content_loss(net, &out, &x)?;
            let style = losses::style_loss(net, &out, &style_batch, l.contextual_bandwidth)?;
            let perceptual = losses::perceptual_loss(net, &out, &intrinsic)?;
            let adv = losses::adversarial_loss(&self.model.discriminator, &out, &x, l.non_saturating)?;
            let e_out = self.frozen.embedder.embed(&out)?;
            let e_target = self.frozen.embedder.embed(&id_target)?;
            let identity = ((e_out - e_target)?.sqr()?.sum_all()? / b as f64)?;
            let modres_l2 = losses::modres_l2(gen)?;
            let total = ((&content * l.content_weight)?
                + (&style * l.style_weight)?
                + (&perceptual * weights.alpha_pl)?
                + (&adv.generator * weights.alpha_adv)?
                + (&identity * l.identity_weight)?
                + (&modres_l2 * l.modres_l2_weight)?)?;
            let value = nn::scalar(&total)?;
            if !value.is_finite() {
                return Err(self.diverged(Stage::III, step, "stage III", value, &report.totals));
            }
            for (name, t) in [
                ("content", &content),
                ("style", &style),
                ("perceptual", &perceptual),
                ("adversarial", &adv.generator),
                ("identity", &identity),
                ("modres_l2", &modres_l2),
            ] {
                self.log.push(step, Stage::III, name, nn::scalar(t)?)?;
            }
            report.totals.push(value);
            g_opt.backward_step(&total)?;
            report.discriminator.push(self.discriminator_step(&mut d_opt, &out, &x)?);
            self.model.iteration += 1;
        }
        self.check_frozen(&fingerprint)?;
        self.model.stage = Stage::III;
        Ok(report)
    }

    fn check_data(&self, data: &ImageDataset) -> Result<()> {
        let res = self.model.config.model.resolution;
        if data.is_empty() {
            return validation("training dataset is empty");
        }
        if data.resolution() != res {
            return validation(format!("dataset resolution {} != model resolution {res}", data.resolution()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::extrinsic::{synthesize_full, SynthesisInput};
    use crate::generator::{LatentCode, LayerwiseLatent};

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model = ModelConfig {
            resolution: 16,
            d_latent: 8,
            n_layers: 4,
            ..ModelConfig::default()
        };
        cfg.train.batch_size = 2;
        cfg.train.intrinsic_iterations = 3;
        cfg.train.stage2_layers = vec![(3, 2), (2, 2)];
        cfg.train.stage3_iterations = 3;
        cfg.losses.offset_iterations = 2;
        cfg
    }

    fn toy_data(n: usize, size: usize) -> ImageDataset {
        let items = (0..n)
            .map(|i| {
                let data: Vec<f32> = (0..3 * size * size)
                    .map(|j| (((i * 31 + j * 7) % 97) as f32 / 48.5) - 1.0)
                    .collect();
                ImageTensor::new(data, size).unwrap()
            })
            .collect();
        ImageDataset::from_images(items).unwrap()
    }

    #[test]
    fn schedule_validation() {
        assert!(validate_layer_schedule(&[(5, 2000), (6, 200)], 8).is_err());
        assert!(validate_layer_schedule(&[(7, 200), (6, 200), (5, 2000)], 18).is_ok());
        assert!(validate_layer_schedule(&[(5, 10), (5, 10)], 8).is_ok());
        assert!(validate_layer_schedule(&[(0, 10)], 8).is_err());
        assert!(validate_layer_schedule(&[], 8).is_err());
        assert!(StageLossWeights::new(-1.0, 0.0).is_err());
    }

    #[test]
    fn moving_average_window() {
        assert_eq!(moving_average(&[2.0, 4.0, 6.0, 8.0], 2), vec![2.0, 3.0, 5.0, 7.0]);
        let r = StageReport {
            totals: vec![4.0, 2.0, 1.0, 1.0],
            ..StageReport::default()
        };
        assert_eq!(r.start_end(2), Some((3.0, 1.0)));
    }

    #[test]
    fn stage1_init_makes_residuals_vanish() {
        let cfg = tiny_config();
        let m = StyleModel::new(&cfg, DType::F64).unwrap();
        stage1_initialize(&m.generator).unwrap();
        assert_eq!(nn::scalar(&m.generator.modres_l2(Some(ModResPath::Enc1)).unwrap()).unwrap(), 0.0);
        let content = LayerwiseLatent::broadcast(&LatentCode(vec![0.3; 8]), 4).unwrap();
        let code = LatentCode(vec![-0.5; 8]);
        let input = SynthesisInput::Latent {
            content: &content,
            code1: &code,
            code2: &code,
        };
        let intrinsic = m.generator.synthesize_intrinsic(&content).unwrap();
        for w in [0.0, 0.4, 1.0] {
            let weights = StyleWeightVector::filled(w, 4).unwrap();
            assert_eq!(synthesize_full(&m.generator, &m.path, &input, &weights, Gates::default()).unwrap(), intrinsic);
        }
    }

    #[test]
    fn zero_iterations_leave_weights() {
        let mut cfg = tiny_config();
        cfg.train.intrinsic_iterations = 0;
        let mut m = StyleModel::new(&cfg, DType::F32).unwrap();
        let before = m.named_tensors();
        let mut t = Trainer::new(&mut m, TrainingLog::new()).unwrap();
        let schedule = StageSchedule::intrinsic(&cfg);
        let r = t.train_intrinsic(&toy_data(2, 16), &schedule).unwrap();
        assert!(r.totals.is_empty());
        for ((n, a), (_, b)) in before.iter().zip(m.named_tensors()) {
            assert_eq!(nn::to_f64_vec(a).unwrap(), nn::to_f64_vec(&b).unwrap(), "{n}");
        }
    }

    #[test]
    fn zero_weights_freeze_stage2_generator() {
        let cfg = tiny_config();
        let mut m = StyleModel::new(&cfg, DType::F32).unwrap();
        m.stage = Stage::I;
        let before: Vec<_> = m.generator.named_params("").iter().map(|(_, v)| nn::to_f64_vec(v.as_tensor()).unwrap()).collect();
        let gmu_before: Vec<_> = m.path.vars().iter().map(|v| nn::to_f64_vec(v.as_tensor()).unwrap()).collect();
        let mut t = Trainer::new(&mut m, TrainingLog::new()).unwrap();
        t.stage2(&StageSchedule::stage2(&cfg), StageLossWeights::new(0.0, 0.0).unwrap()).unwrap();
        let after: Vec<_> = m.generator.named_params("").iter().map(|(_, v)| nn::to_f64_vec(v.as_tensor()).unwrap()).collect();
        let gmu_after: Vec<_> = m.path.vars().iter().map(|v| nn::to_f64_vec(v.as_tensor()).unwrap()).collect();
        assert_eq!(before, after);
        assert_eq!(gmu_before, gmu_after);
        assert_eq!(m.stage, Stage::II);
    }

    #[test]
    fn stage_order_is_enforced() {
        let cfg = tiny_config();
        let mut m = StyleModel::new(&cfg, DType::F32).unwrap();
        m.stage = Stage::I;
        let mut t = Trainer::new(&mut m, TrainingLog::new()).unwrap();
        let w = StageLossWeights::from_config(&cfg).unwrap();
        let err = t.stage3(&toy_data(2, 16), &StageSchedule::stage3(&cfg), w).unwrap_err();
        assert!(matches!(err, Error::StageOrder { .. }));
        t.model.stage = Stage::Pretrained;
        assert!(matches!(t.stage2(&StageSchedule::stage2(&cfg), w), Err(Error::StageOrder { .. })));
    }

    #[test]
    fn stage3_logs_exact_keys_and_keeps_bounds() {
        let cfg = tiny_config();
        let data = toy_data(3, 16);
        let mut m = StyleModel::new(&cfg, DType::F32).unwrap();
        stage1_initialize(&m.generator).unwrap();
        m.stage = Stage::II;
        let mut t = Trainer::new(&mut m, TrainingLog::new()).unwrap();
        let w = StageLossWeights::from_config(&cfg).unwrap();
        let r = t.stage3(&data, &StageSchedule::stage3(&cfg), w).unwrap();
        assert_eq!(r.totals.len(), 3);
        assert_eq!(r.offset.as_ref().unwrap().trajectory.len(), 2);
        let mut keys: Vec<_> = t.log.rows().iter().map(|r| r.loss_name.clone()).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys, ["adversarial", "content", "identity", "modres_l2", "perceptual", "style"]);
        assert!(t.log.rows().iter().all(|r| r.stage == Stage::III));
        let img = data.items()[0].clone();
        let out = t
            .model
            .stylize(&img, None, &crate::model::StylizeParams::new(StyleWeightVector::ones(4)))
            .unwrap();
        assert!(out.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(m.stage, Stage::III);
    }

    #[test]
    fn log_file_mirrors_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.jsonl");
        let mut log = TrainingLog::with_file(&path).unwrap();
        log.push(0, Stage::II, "perceptual", 1.5).unwrap();
        log.push(1, Stage::II, "perceptual", 1.25).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), log.to_jsonl());
        let row: LogRow = serde_json::from_str(log.to_jsonl().lines().next().unwrap()).unwrap();
        assert_eq!(row.loss_name, "perceptual");
        assert_eq!(log.values(Stage::II, "perceptual"), vec![1.5, 1.25]);
    }
}
