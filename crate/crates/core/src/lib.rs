//! Dual-path facial style transfer: an intrinsic style-based generator plus
//! an extrinsic path that injects encoder style codes through gated,
//! modulated residual blocks, trained by a three-stage curriculum.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod extrinsic;
pub mod generator;
pub mod gradcheck;
pub mod image_pipeline;
pub mod losses;
pub mod model;
pub mod nn;
pub mod semantics;
pub mod service;
pub mod surrogate;
pub mod trainer;

pub use candle_core::DType;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use extrinsic::{synthesize_full, ExtrinsicPath, Gates, SynthesisInput};
pub use generator::{GeneratorModel, LatentCode, LayerwiseLatent, StyleWeightVector};
pub use image_pipeline::{ImageDataset, ImageTensor};
pub use model::{Stage, StyleModel, StylizeParams};
