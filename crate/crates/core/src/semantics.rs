//! Closed-form latent semantics: principal directions of the mapping network's
//! first affine layer, latent manipulation along them, and the regularized
//! refinement of a direction offset.

use candle_core::{DType, Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::config::{LossConfig, SegSign};
use crate::error::{validation, Error, Result};
use crate::generator::{GeneratorModel, LatentCode, MappingNetwork};
use crate::nn;
use crate::surrogate::{FaceEmbedder, FaceSegmenter};

/// Eigenvalues closer than this (relative to the largest) count as tied.
const TIE_TOLERANCE: f64 = 1e-9;

/// A unit direction in latent space and the squared gain it attains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticDirection {
    pub rank: usize,
    pub eigenvalue: f64,
    pub vector: Vec<f64>,
}

impl SemanticDirection {
    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Top `top_n` unit vectors maximizing `|W y|^2`, for a row-major `rows x cols`
/// matrix. Ties are broken in canonical basis order and each vector's first
/// nonzero component is made positive.
pub fn factorize_matrix(w: &[f64], rows: usize, cols: usize, top_n: usize) -> Result<Vec<SemanticDirection>> {
    if w.len() != rows * cols || cols == 0 {
        return validation(format!("matrix data of length {} does not fit {rows}x{cols}", w.len()));
    }
    if top_n < 1 || top_n > cols {
        return validation(format!("top_n must lie in 1..={cols}, got {top_n}"));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return validation("mapping weights contain non-finite values");
    }
    let m = DMatrix::from_row_slice(rows, cols, w);
    let gram = m.transpose() * &m;
    let eig = SymmetricEigen::new(gram.clone());
    let mut order: Vec<usize> = (0..cols).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let scale = eig.eigenvalues.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));

    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(cols);
    let mut values: Vec<f64> = Vec::with_capacity(cols);
    let mut i = 0;
    while i < cols {
        let lead = eig.eigenvalues[order[i]];
        let mut j = i + 1;
        while j < cols && (lead - eig.eigenvalues[order[j]]).abs() <= TIE_TOLERANCE * scale {
            j += 1;
        }
        let group: Vec<DVector<f64>> = order[i..j].iter().map(|&k| eig.eigenvectors.column(k).into_owned()).collect();
        for v in canonical_basis_of(&group, cols) {
            values.push((&m * &v).norm_squared());
            basis.push(v);
        }
        i = j;
    }

    Ok(basis
        .into_iter()
        .zip(values)
        .take(top_n)
        .enumerate()
        .map(|(rank, (v, value))| SemanticDirection {
            rank,
            eigenvalue: value.max(0.0),
            vector: v.iter().copied().collect(),
        })
        .collect())
}

/// Re-expresses an orthonormal basis of an eigenspace by projecting the
/// canonical basis vectors onto it in order and orthonormalizing.
fn canonical_basis_of(group: &[DVector<f64>], dim: usize) -> Vec<DVector<f64>> {
    if group.len() == 1 {
        return vec![sign_normalized(group[0].clone())];
    }
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(group.len());
    for e in 0..dim {
        if out.len() == group.len() {
            break;
        }
        let mut v = DVector::zeros(dim);
        for g in group {
            v += g * g[e];
        }
        for u in &out {
            let p = u.dot(&v);
            v -= u * p;
        }
        let n = v.norm();
        if n > 1e-6 {
            out.push(sign_normalized(v / n));
        }
    }
    out
}

fn sign_normalized(v: DVector<f64>) -> DVector<f64> {
    let first = v.iter().copied().find(|x| x.abs() > 1e-12).unwrap_or(0.0);
    if first < 0.0 {
        -v
    } else {
        v
    }
}

/// Principal directions of the mapping network's first-layer weight.
pub fn factorize(net: &MappingNetwork, top_n: usize) -> Result<Vec<SemanticDirection>> {
    let d = net.dim();
    factorize_matrix(&net.first_layer_weight()?, d, d, top_n)
}

pub fn directions_json(dirs: &[SemanticDirection]) -> String {
    serde_json::to_string_pretty(dirs).expect("directions serialize")
}

/// Mapped latent of `base + sigma * direction`.
pub fn manipulate(net: &MappingNetwork, base: &LatentCode, sigma: f64, direction: &SemanticDirection) -> Result<LatentCode> {
    if !sigma.is_finite() {
        return validation(format!("manipulation intensity must be finite, got {sigma}"));
    }
    if base.dim() != net.dim() || direction.dim() != net.dim() {
        return validation(format!(
            "latent ({}) and direction ({}) must match mapping dimension {}",
            base.dim(),
            direction.dim(),
            net.dim()
        ));
    }
    net.map_latent(&base.add_scaled(&direction.vector, sigma))
}

/// Frozen networks and fixed inputs of the offset objective.
pub struct OffsetProblem<'a> {
    pub generator: &'a GeneratorModel,
    pub embedder: &'a FaceEmbedder,
    pub segmenter: &'a FaceSegmenter,
    pub sigma: f64,
    /// Direction being traversed, `[1, d]`.
    pub direction: Tensor,
    /// Latents the traversal starts from, `[N, d]`; zeros reproduce the
    /// plain `G(sigma * y)` form.
    pub anchors: Tensor,
}

impl<'a> OffsetProblem<'a> {
    pub fn new(
        generator: &'a GeneratorModel,
        embedder: &'a FaceEmbedder,
        segmenter: &'a FaceSegmenter,
        sigma: f64,
        direction: &[f64],
    ) -> Result<Self> {
        let d = generator.d_latent();
        let anchors = Tensor::zeros((1, d), generator.dtype(), &nn::device())?;
        Self::with_anchors(generator, embedder, segmenter, sigma, direction, anchors)
    }

    pub fn with_anchors(
        generator: &'a GeneratorModel,
        embedder: &'a FaceEmbedder,
        segmenter: &'a FaceSegmenter,
        sigma: f64,
        direction: &[f64],
        anchors: Tensor,
    ) -> Result<Self> {
        let d = generator.d_latent();
        if !sigma.is_finite() {
            return validation(format!("sigma must be finite, got {sigma}"));
        }
        if direction.len() != d {
            return validation(format!("direction has {} entries, expected {d}", direction.len()));
        }
        if anchors.rank() != 2 || anchors.dims()[1] != d {
            return validation(format!("anchors shape {:?}, expected [N, {d}]", anchors.dims()));
        }
        let direction = LatentCode(direction.to_vec()).to_tensor(generator.dtype())?;
        Ok(Self {
            generator,
            embedder,
            segmenter,
            sigma,
            direction,
            anchors: anchors.detach(),
        })
    }

    fn render(&self, latent: &Tensor) -> Result<Tensor> {
        let z = vec![latent.clone(); self.generator.n_layers()];
        self.generator.synthesize_intrinsic_batch(&z)
    }

    /// Images at the traversed latent and at the traversed latent shifted by
    /// `sigma * offset`. `offset` is `[1, d]`.
    fn image_pair(&self, offset: &Tensor) -> Result<(Tensor, Tensor)> {
        let moved = self.anchors.broadcast_add(&(&self.direction * self.sigma)?)?;
        let shifted = moved.broadcast_add(&(offset * self.sigma)?)?;
        Ok((self.render(&moved)?.detach(), self.render(&shifted)?))
    }

    /// Identity term: squared embedding distance, averaged over anchors.
    pub fn identity_term(&self, offset: &Tensor) -> Result<Tensor> {
        let (a, b) = self.image_pair(offset)?;
        sq_distance(&self.embedder.embed(&a)?, &self.embedder.embed(&b)?)
    }

    /// Segmentation term: squared mask-logit distance, averaged over anchors.
    pub fn segmentation_term(&self, offset: &Tensor) -> Result<Tensor> {
        let (a, b) = self.image_pair(offset)?;
        sq_distance(&self.segmenter.segment(&a)?, &self.segmenter.segment(&b)?)
    }

    /// `identity -/+ alpha_seg * segmentation`.
    pub fn objective(&self, offset: &Tensor, cfg: &MapNetLossConfig) -> Result<Tensor> {
        let (a, b) = self.image_pair(offset)?;
        let id = sq_distance(&self.embedder.embed(&a)?, &self.embedder.embed(&b)?)?;
        let seg = sq_distance(&self.segmenter.segment(&a)?, &self.segmenter.segment(&b)?)?;
        let sign = match cfg.seg_sign {
            SegSign::Subtractive => -1.0,
            SegSign::Restorative => 1.0,
        };
        Ok((id + (seg * (sign * cfg.alpha_seg))?)?)
    }

    fn offset_tensor(&self, offset: &[f64]) -> Result<Tensor> {
        let d = self.generator.d_latent();
        if offset.len() != d {
            return validation(format!("offset has {} entries, expected {d}", offset.len()));
        }
        LatentCode(offset.to_vec()).to_tensor(self.generator.dtype())
    }
}

/// Per-sample squared Euclidean distance, averaged over the batch.
fn sq_distance(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = a.dims()[0];
    Ok(((a - b)?.sqr()?.sum_all()? / n as f64)?)
}

pub fn identity_loss(problem: &OffsetProblem<'_>, offset: &[f64]) -> Result<f64> {
    nn::scalar(&problem.identity_term(&problem.offset_tensor(offset)?)?)
}

pub fn segmentation_loss(problem: &OffsetProblem<'_>, offset: &[f64]) -> Result<f64> {
    nn::scalar(&problem.segmentation_term(&problem.offset_tensor(offset)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MapNetLossConfig {
    pub alpha_seg: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seg_sign: SegSign,
}

impl Default for MapNetLossConfig {
    fn default() -> Self {
        Self::from(&LossConfig::default())
    }
}

impl From<&LossConfig> for MapNetLossConfig {
    fn from(c: &LossConfig) -> Self {
        Self {
            alpha_seg: c.alpha_seg,
            iterations: c.offset_iterations,
            learning_rate: c.offset_lr,
            seg_sign: c.seg_sign,
        }
    }
}

impl MapNetLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_seg >= 0.0 && self.alpha_seg.is_finite()) {
            return validation(format!("alpha_seg must be finite and >= 0, got {}", self.alpha_seg));
        }
        if self.iterations < 1 {
            return validation("offset_iterations must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return validation(format!("offset learning rate must be positive, got {}", self.learning_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffsetResult {
    pub offset: Vec<f64>,
    /// Loss before each step.
    pub trajectory: Vec<f64>,
    /// Loss at the returned offset.
    pub final_loss: f64,
}

/// Plain gradient descent on `loss(x)` from `x0`. The loss closure receives a
/// differentiable `[1, n]` tensor.
pub fn gradient_descent(
    x0: &[f64],
    dtype: DType,
    learning_rate: f64,
    iterations: usize,
    mut loss: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<OffsetResult> {
    let x = Var::from_tensor(&LatentCode(x0.to_vec()).to_tensor(dtype)?)?;
    let mut trajectory = Vec::with_capacity(iterations);
    for step in 0..iterations {
        let l = loss(x.as_tensor())?;
        let value = nn::scalar(&l)?;
        trajectory.push(value);
        if !value.is_finite() {
            return Err(Error::Divergence {
                stage: "offset".into(),
                step,
                message: format!("non-finite offset loss {value}"),
                trajectory,
                checkpoint: None,
            });
        }
        let grads = l.backward()?;
        if let Some(g) = grads.get(x.as_tensor()) {
            x.set(&(x.as_tensor() - (g * learning_rate)?)?)?;
        }
    }
    let final_loss = nn::scalar(&loss(x.as_tensor())?)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            stage: "offset".into(),
            step: iterations,
            message: format!("non-finite offset loss {final_loss}"),
            trajectory,
            checkpoint: None,
        });
    }
    Ok(OffsetResult {
        offset: nn::to_f64_vec(x.as_tensor())?,
        trajectory,
        final_loss,
    })
}

/// Refines the offset `initial` by `cfg.iterations` descent steps on the
/// identity/segmentation objective.
pub fn optimize_offset(problem: &OffsetProblem<'_>, cfg: &MapNetLossConfig, initial: &[f64]) -> Result<OffsetResult> {
    cfg.validate()?;
    problem.offset_tensor(initial)?;
    gradient_descent(initial, problem.generator.dtype(), cfg.learning_rate, cfg.iterations, |x| {
        problem.objective(x, cfg)
    })
}
