//! Training losses and the discriminator.
//!
//! Every loss returns a scalar tensor so it can be differentiated; inputs are
//! `[N, 3, H, W]` image batches unless stated otherwise.

use candle_core::{DType, Tensor, Var, D};

use crate::error::{validation, Result};
use crate::generator::{GeneratorModel, ModResPath};
use crate::nn::{self, join, lrelu, mse, softplus, Affine, Conv, Parameters};
use crate::surrogate::PerceptualFeatureNet;

/// Four stride-2 convolutions and a linear head producing one logit per
/// image; probabilities are the sigmoid of the logit.
#[derive(Debug)]
pub struct Discriminator {
    convs: Vec<Conv>,
    head: Affine,
    resolution: usize,
}

impl Discriminator {
    pub fn new(resolution: usize, seed: u64, dtype: DType) -> Result<Self> {
        if resolution < 16 || !resolution.is_power_of_two() {
            return validation(format!("discriminator resolution {resolution} must be a power of two >= 16"));
        }
        let mut rng = nn::rng_for(seed, "discriminator");
        let channels = [3, 16, 32, 32, 32];
        let convs = channels
            .windows(2)
            .map(|w| Conv::new(&mut rng, w[0], w[1], 3, 2, true, dtype))
            .collect::<Result<_>>()?;
        let side = resolution / 16;
        Ok(Self {
            convs,
            head: Affine::new(&mut rng, 32 * side * side, 1, 0.0, dtype)?,
            resolution,
        })
    }

    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        match x.dims() {
            [_, 3, h, w] if *h == self.resolution && *w == self.resolution => {}
            dims => return validation(format!("discriminator expects [N, 3, {0}, {0}], got {dims:?}", self.resolution)),
        }
        let mut h = x.clone();
        for c in &self.convs {
            h = lrelu(&c.forward(&h)?)?;
        }
        let flat = h.flatten_from(1)?;
        Ok(self.head.forward(&flat)?.squeeze(1)?)
    }

    /// Realness probability in (0, 1) per image.
    pub fn probability(&self, x: &Tensor) -> Result<Tensor> {
        nn::sigmoid(&self.logits(x)?)
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            convs: self.convs.iter().map(Conv::deep_clone).collect::<Result<_>>()?,
            head: self.head.deep_clone()?,
            resolution: self.resolution,
        })
    }
}

impl Parameters for Discriminator {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Var)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.visit_params(&join(prefix, &format!("conv{i}")), f);
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuralLossConfig {
    /// Number of leading blocks compared.
    pub blocks: usize,
}

impl Default for StructuralLossConfig {
    fn default() -> Self {
        Self { blocks: 2 }
    }
}

/// Mean over blocks of the element-mean squared difference.
pub fn structural_loss_from_activations(base: &[Tensor], transfer: &[Tensor]) -> Result<Tensor> {
    if base.is_empty() || base.len() != transfer.len() {
        return validation(format!("activation lists of length {} and {}", base.len(), transfer.len()));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in base.iter().zip(transfer) {
        if a.dims() != b.dims() {
            return validation(format!("activation shapes {:?} vs {:?}", a.dims(), b.dims()));
        }
        let term = mse(a, b)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok((total.expect("non-empty") / base.len() as f64)?)
}

/// Structural loss between the frozen base generator and the generator being
/// fine-tuned, over the first `cfg.blocks` synthesis blocks. Base activations
/// are detached.
pub fn structural_loss(
    base: &GeneratorModel,
    transfer: &GeneratorModel,
    latents: &[Tensor],
    cfg: StructuralLossConfig,
) -> Result<Tensor> {
    if !base.same_architecture(transfer) {
        return validation("structural loss needs two generators with one architecture");
    }
    let a: Vec<Tensor> = base
        .block_activations_batch(latents, cfg.blocks)?
        .into_iter()
        .map(|t| t.detach())
        .collect();
    let b = transfer.block_activations_batch(latents, cfg.blocks)?;
    structural_loss_from_activations(&a, &b)
}

/// The two sides of the saturating adversarial objective
/// `E[log(1 - D(fake))] + E[log D(real)]`.
#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    /// What the generator minimizes: `E[log(1 - D(fake))]`, or
    /// `-E[log D(fake)]` in the non-saturating variant.
    pub generator: Tensor,
    /// What the discriminator minimizes: the negated objective.
    pub discriminator: Tensor,
}

impl AdversarialTerms {
    /// Value of the min-max objective.
    pub fn objective(&self) -> Result<f64> {
        Ok(-nn::scalar(&self.discriminator)?)
    }
}

/// Adversarial terms from discriminator logits on independent fake and real
/// batches.
pub fn adversarial_from_logits(fake_logits: &Tensor, real_logits: &Tensor, non_saturating: bool) -> Result<AdversarialTerms> {
    if fake_logits.elem_count() == 0 || real_logits.elem_count() == 0 {
        return validation("adversarial loss needs non-empty real and fake batches");
    }
    // log D(x) = -softplus(-l), log(1 - D(x)) = -softplus(l)
    let log_one_minus_fake = softplus(fake_logits)?.neg()?.mean_all()?;
    let log_real = softplus(&real_logits.neg()?)?.neg()?.mean_all()?;
    let generator = if non_saturating {
        softplus(&fake_logits.neg()?)?.mean_all()?
    } else {
        log_one_minus_fake.clone()
    };
    let discriminator = (log_one_minus_fake + log_real)?.neg()?;
    Ok(AdversarialTerms { generator, discriminator })
}

pub fn adversarial_loss(d: &Discriminator, fake: &Tensor, real: &Tensor, non_saturating: bool) -> Result<AdversarialTerms> {
    if fake.dims().first() == Some(&0) || real.dims().first() == Some(&0) {
        return validation("adversarial loss needs non-empty real and fake batches");
    }
    adversarial_from_logits(&d.logits(fake)?, &d.logits(real)?, non_saturating)
}

/// Adversarial terms from already-computed probabilities, as plain numbers:
/// `(generator_term, discriminator_term)`.
pub fn adversarial_from_probabilities(fake: &[f64], real: &[f64]) -> Result<(f64, f64)> {
    if fake.is_empty() || real.is_empty() {
        return validation("adversarial loss needs non-empty real and fake batches");
    }
    if fake.iter().chain(real).any(|p| !(*p > 0.0 && *p < 1.0)) {
        return validation("discriminator probabilities must lie strictly inside (0, 1)");
    }
    let mean = |v: &[f64], f: &dyn Fn(f64) -> f64| v.iter().map(|p| f(*p)).sum::<f64>() / v.len() as f64;
    let gen = mean(fake, &|p| (1.0 - p).ln());
    let real_term = mean(real, &|p| p.ln());
    Ok((gen, -(gen + real_term)))
}

fn check_pair(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return validation(format!("image shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Sum over feature scales of the mean squared feature difference.
pub fn perceptual_loss(net: &PerceptualFeatureNet, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_pair(a, b)?;
    let fa = net.features(a)?;
    let fb = net.features(b)?;
    let mut total = mse(&fa[0], &fb[0])?;
    for (x, y) in fa.iter().zip(&fb).skip(1) {
        total = (total + mse(x, y)?)?;
    }
    Ok(total)
}

/// Mean squared difference of deepest-scale features against the source.
pub fn content_loss(net: &PerceptualFeatureNet, out: &Tensor, source: &Tensor) -> Result<Tensor> {
    check_pair(out, source)?;
    mse(&net.deepest(out)?, &net.deepest(source)?)
}

/// Feature-statistics matching: per scale, squared error of the per-channel
/// means plus that of the per-channel standard deviations.
pub fn feature_matching_loss(net: &PerceptualFeatureNet, out: &Tensor, style: &Tensor) -> Result<Tensor> {
    check_pair(out, style)?;
    let fo = net.features(out)?;
    let fs = net.features(style)?;
    let mut total: Option<Tensor> = None;
    for (x, y) in fo.iter().zip(&fs) {
        let (mx, sx) = nn::instance_moments(x)?;
        let (my, sy) = nn::instance_moments(y)?;
        let term = (mse(&mx, &my)? + mse(&sx, &sy)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three scales"))
}

/// Stabilizer in the relative-distance normalization of the contextual loss.
pub const CONTEXTUAL_EPS: f64 = 1e-5;

/// Contextual loss between two feature maps `[N, C, H, W]`, averaged over the
/// batch. Each spatial position is a feature patch; both sets are centered on
/// the target's mean and L2-normalized, cosine distances are normalized by
/// each output patch's nearest distance, turned into affinities with
/// `exp((1 - d) / bandwidth)`, and row-normalized. The loss is
/// `-log(mean over target patches of the max affinity)`.
pub fn contextual_loss_features(out: &Tensor, target: &Tensor, bandwidth: f64) -> Result<Tensor> {
    check_pair(out, target)?;
    let (n, c, h, w) = out.dims4()?;
    let x = out.reshape((n, c, h * w))?;
    let y = target.reshape((n, c, h * w))?;
    let mu = y.mean_keepdim(D::Minus1)?;
    let normalize = |t: &Tensor| -> Result<Tensor> {
        let t = t.broadcast_sub(&mu)?;
        let norm = (t.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(t.broadcast_div(&norm)?)
    };
    let xn = normalize(&x)?;
    let yn = normalize(&y)?;
    // cos[b, i, j] between output patch i and target patch j
    let cos = xn.transpose(1, 2)?.contiguous()?.matmul(&yn)?;
    let dist = cos.affine(-1.0, 1.0)?;
    let nearest = dist.min_keepdim(D::Minus1)?;
    let rel = dist.broadcast_div(&(nearest + CONTEXTUAL_EPS)?)?;
    let affinity = rel.affine(-1.0 / bandwidth, 1.0 / bandwidth)?.exp()?;
    let cx = affinity.broadcast_div(&affinity.sum_keepdim(D::Minus1)?)?;
    // For each target patch, its best-matching output patch.
    let best = cx.max(1)?;
    let score = best.mean(D::Minus1)?;
    Ok(score.log()?.neg()?.mean_all()?)
}

pub fn contextual_loss(net: &PerceptualFeatureNet, out: &Tensor, style: &Tensor, bandwidth: f64) -> Result<Tensor> {
    check_pair(out, style)?;
    contextual_loss_features(&net.deepest(out)?, &net.deepest(style)?, bandwidth)
}

/// Style loss: feature-statistics matching plus contextual loss.
pub fn style_loss(net: &PerceptualFeatureNet, out: &Tensor, style: &Tensor, bandwidth: f64) -> Result<Tensor> {
    Ok((feature_matching_loss(net, out, style)? + contextual_loss(net, out, style, bandwidth)?)?)
}

/// Sum of squared ModRes filter weights.
pub fn modres_l2(gen: &GeneratorModel) -> Result<Tensor> {
    gen.modres_l2(None)
}

pub fn modres_l2_path(gen: &GeneratorModel, path: ModResPath) -> Result<Tensor> {
    gen.modres_l2(Some(path))
}
