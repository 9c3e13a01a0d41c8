//! Frozen, seeded stand-ins for the pre-trained networks: style encoders,
//! the perceptual feature network, the face embedder and the face segmenter.
//!
//! Weights are plain tensors, never variables, so no optimizer can reach them
//! and no gradient is ever computed for them.

use candle_core::{DType, Tensor, D};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{validation, Result};
use crate::generator::LatentCode;
use crate::image_pipeline::ImageTensor;
use crate::nn::{self, conv2d, lrelu};

#[derive(Debug, Clone)]
struct FrozenConv {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
}

/// Stack of 3x3 convolutions with leaky rectifiers.
#[derive(Debug, Clone)]
pub struct FrozenConvStack {
    layers: Vec<FrozenConv>,
}

impl FrozenConvStack {
    pub fn new(rng: &mut ChaCha8Rng, channels: &[usize], stride: usize, dtype: DType) -> Result<Self> {
        let layers = channels
            .windows(2)
            .map(|w| {
                let (ci, co) = (w[0], w[1]);
                Ok(FrozenConv {
                    weight: nn::gaussian(rng, &[co, ci, 3, 3], ci * 9, dtype)?,
                    bias: nn::gaussian(rng, &[co], 1, dtype)?.affine(0.1, 0.0)?,
                    stride,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Activations after every layer.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for l in &self.layers {
            h = lrelu(&conv2d(&h, &l.weight, Some(&l.bias), l.stride)?)?;
            out.push(h.clone());
        }
        Ok(out)
    }

    fn hash_into(&self, hasher: &mut Sha256) -> Result<()> {
        for l in &self.layers {
            for t in [&l.weight, &l.bias] {
                for v in nn::to_f64_vec(t)? {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        Ok(())
    }
}

fn check_image_batch(x: &Tensor, resolution: usize, what: &str) -> Result<usize> {
    match x.dims() {
        [n, 3, h, w] if *h == resolution && *w == resolution => Ok(*n),
        dims => validation(format!(
            "{what} expects [N, 3, {resolution}, {resolution}] images, got {dims:?}"
        )),
    }
}

fn fingerprint_of(parts: &[&Tensor], stack: &FrozenConvStack) -> Result<String> {
    let mut hasher = Sha256::new();
    stack.hash_into(&mut hasher)?;
    for t in parts {
        for v in nn::to_f64_vec(t)? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum EncoderTag {
    /// Inverts a portrait into the intrinsic generator's latent space.
    Sg,
    /// First extrinsic style encoder (color path).
    Enc1,
    /// Second extrinsic style encoder (structure path).
    Enc2,
}

/// Four stride-2 convolutions, global average pooling and an affine head.
/// Codes are rescaled to unit root-mean-square, like standard normal draws.
#[derive(Debug, Clone)]
pub struct SurrogateEncoder {
    tag: EncoderTag,
    seed: u64,
    resolution: usize,
    stack: FrozenConvStack,
    head_weight: Tensor,
    head_bias: Tensor,
}

impl SurrogateEncoder {
    pub fn new(tag: EncoderTag, seed: u64, resolution: usize, d_latent: usize, dtype: DType) -> Result<Self> {
        if resolution < 16 {
            return validation(format!("encoder input resolution {resolution} below 16"));
        }
        let mut rng = nn::rng_for(seed, "surrogate-encoder");
        let stack = FrozenConvStack::new(&mut rng, &[3, 8, 16, 32, 32], 2, dtype)?;
        Ok(Self {
            tag,
            seed,
            resolution,
            stack,
            head_weight: nn::gaussian(&mut rng, &[d_latent, 32], 32, dtype)?,
            head_bias: nn::gaussian(&mut rng, &[d_latent], 1, dtype)?.affine(0.1, 0.0)?,
        })
    }

    pub fn tag(&self) -> EncoderTag {
        self.tag
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `[N, 3, H, W]` images to `[N, d]` codes.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        check_image_batch(x, self.resolution, "encoder")?;
        let feats = self.stack.features(&x.to_dtype(self.head_weight.dtype())?)?;
        let pooled = feats.last().expect("non-empty stack").mean(D::Minus1)?.mean(D::Minus1)?;
        let code = pooled
            .matmul(&self.head_weight.t()?)?
            .broadcast_add(&self.head_bias)?;
        let rms = (code.sqr()?.mean_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(code.broadcast_div(&rms)?)
    }

    pub fn encode(&self, img: &ImageTensor) -> Result<LatentCode> {
        LatentCode::from_tensor(&self.encode_batch(&img.to_tensor(self.head_weight.dtype())?)?)
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_of(&[&self.head_weight, &self.head_bias], &self.stack)
    }
}

/// Three stride-2 feature scales, standing in for a VGG-style loss network.
#[derive(Debug, Clone)]
pub struct PerceptualFeatureNet {
    seed: u64,
    stack: FrozenConvStack,
}

impl PerceptualFeatureNet {
    pub const SCALES: usize = 3;

    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = nn::rng_for(seed, "perceptual");
        Ok(Self {
            seed,
            stack: FrozenConvStack::new(&mut rng, &[3, 8, 16, 32], 2, dtype)?,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Features at the three scales, finest first.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        if x.rank() != 4 || x.dims()[1] != 3 {
            return validation(format!("perceptual net expects [N, 3, H, W], got {:?}", x.dims()));
        }
        self.stack.features(x)
    }

    /// Deepest-scale features.
    pub fn deepest(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.features(x)?.pop().expect("three scales"))
    }

    /// Globally pooled deepest features, `[N, 32]`.
    pub fn pooled(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.deepest(x)?.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_of(&[], &self.stack)
    }
}

/// Identity embedding network; outputs unit-norm vectors.
#[derive(Debug, Clone)]
pub struct FaceEmbedder {
    stack: FrozenConvStack,
    head: Tensor,
}

impl FaceEmbedder {
    pub const DIM: usize = 32;

    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = nn::rng_for(seed, "face-embedder");
        Ok(Self {
            stack: FrozenConvStack::new(&mut rng, &[3, 8, 16, 32], 2, dtype)?,
            head: nn::gaussian(&mut rng, &[Self::DIM, 32], 32, dtype)?,
        })
    }

    /// `[N, 3, H, W]` to `[N, DIM]` unit vectors.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dims()[1] != 3 {
            return validation(format!("embedder expects [N, 3, H, W], got {:?}", x.dims()));
        }
        let feats = self.stack.features(x)?;
        let pooled = feats.last().expect("non-empty").mean(D::Minus1)?.mean(D::Minus1)?;
        let e = pooled.matmul(&self.head.t()?)?;
        let norm = (e.sqr()?.sum_keepdim(1)? + 1e-12)?.sqrt()?;
        Ok(e.broadcast_div(&norm)?)
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_of(&[&self.head], &self.stack)
    }
}

/// Per-pixel two-class mask logits at a quarter of the input resolution.
#[derive(Debug, Clone)]
pub struct FaceSegmenter {
    stack: FrozenConvStack,
    classifier: Tensor,
    constant: Option<f64>,
}

impl FaceSegmenter {
    pub fn new(seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = nn::rng_for(seed, "face-segmenter");
        Ok(Self {
            stack: FrozenConvStack::new(&mut rng, &[3, 8, 16], 2, dtype)?,
            classifier: nn::gaussian(&mut rng, &[2, 16, 1, 1], 16, dtype)?,
            constant: None,
        })
    }

    /// A segmenter that returns `value` everywhere, whatever its input.
    pub fn constant(value: f64, dtype: DType) -> Result<Self> {
        let mut s = Self::new(0, dtype)?;
        s.constant = Some(value);
        Ok(s)
    }

    pub fn segment(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 4 || x.dims()[1] != 3 {
            return validation(format!("segmenter expects [N, 3, H, W], got {:?}", x.dims()));
        }
        let (n, _, h, w) = x.dims4()?;
        if let Some(v) = self.constant {
            return nn::constant(v, &[n, 2, h / 4, w / 4], x.dtype());
        }
        let feats = self.stack.features(x)?;
        conv2d(feats.last().expect("non-empty"), &self.classifier, None, 1)
    }

    pub fn fingerprint(&self) -> Result<String> {
        fingerprint_of(&[&self.classifier], &self.stack)
    }
}

/// The frozen networks used by losses and evaluation.
#[derive(Debug, Clone)]
pub struct FrozenNets {
    pub perceptual: PerceptualFeatureNet,
    pub embedder: FaceEmbedder,
    pub segmenter: FaceSegmenter,
}

impl FrozenNets {
    pub fn new(seeds: &crate::config::FrozenSeeds, dtype: DType) -> Result<Self> {
        Ok(Self {
            perceptual: PerceptualFeatureNet::new(seeds.perceptual, dtype)?,
            embedder: FaceEmbedder::new(seeds.embedder, dtype)?,
            segmenter: FaceSegmenter::new(seeds.segmenter, dtype)?,
        })
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(format!(
            "{}:{}:{}",
            self.perceptual.fingerprint()?,
            self.embedder.fingerprint()?,
            self.segmenter.fingerprint()?
        ))
    }
}
