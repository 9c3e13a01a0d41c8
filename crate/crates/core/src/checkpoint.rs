//! Versioned checkpoint files.
//!
//! Layout: 8 magic bytes, a little-endian `u64` header length, a JSON header,
//! then the raw little-endian tensor payload. The header carries a SHA-256 of
//! the payload.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{EncoderSeeds, RunConfig};
use crate::error::{io_err, Error, Result};
use crate::image_pipeline::write_atomic;
use crate::model::{Stage, StyleModel};
use crate::nn;

pub const MAGIC: &[u8; 8] = b"SFUSECK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub stage: Stage,
    pub iteration: usize,
    pub config_hash: String,
    pub encoder_seeds: EncoderSeeds,
    pub config: RunConfig,
    pub offset: Option<Vec<f64>>,
    pub tensors: Vec<TensorEntry>,
    pub payload_sha256: String,
}

fn dtype_name(dtype: DType) -> Result<&'static str> {
    match dtype {
        DType::F32 => Ok("f32"),
        DType::F64 => Ok("f64"),
        other => Err(Error::Validation(format!("cannot store {other:?} tensors"))),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::Validation(format!("cannot store {other:?} tensors"))),
    })
}

fn tensor_from_bytes(entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor> {
    let dev = nn::device();
    let shape = entry.shape.as_slice();
    let t = match entry.dtype.as_str() {
        "f32" => {
            let v: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        "f64" => {
            let v: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, shape, &dev)?
        }
        other => return Err(Error::Integrity(format!("unknown tensor dtype {other}"))),
    };
    Ok(t)
}

/// Serializes a model to checkpoint bytes.
pub fn encode(model: &StyleModel) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_tensors() {
        let bytes = tensor_bytes(&t)?;
        tensors.push(TensorEntry {
            name,
            dtype: dtype_name(t.dtype())?.to_string(),
            shape: t.dims().to_vec(),
            offset: payload.len(),
            bytes: bytes.len(),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        stage: model.stage,
        iteration: model.iteration,
        config_hash: model.config.hash(),
        encoder_seeds: model.config.extrinsic.encoder_seeds,
        config: model.config.clone(),
        offset: model.offset.clone(),
        tensors,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parses and verifies the header, returning it with the payload slice.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Integrity("not a checkpoint file (bad magic)".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let Some(json) = bytes.get(16..16usize.saturating_add(len)) else {
        return Err(Error::Integrity("truncated header".into()));
    };
    let raw: serde_json::Value =
        serde_json::from_slice(json).map_err(|e| Error::Integrity(format!("unreadable header: {e}")))?;
    let found = raw.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::IncompatibleVersion {
            found,
            expected: FORMAT_VERSION,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_value(raw).map_err(|e| Error::Integrity(format!("malformed header: {e}")))?;
    let payload = &bytes[16 + len..];
    if hex::encode(Sha256::digest(payload)) != header.payload_sha256 {
        return Err(Error::Integrity("payload checksum mismatch".into()));
    }
    if header.config.hash() != header.config_hash {
        return Err(Error::Integrity("stored config does not match its hash".into()));
    }
    Ok((header, payload))
}

pub fn decode(bytes: &[u8]) -> Result<StyleModel> {
    let (header, payload) = decode_header(bytes)?;
    let dtype = match header.tensors.first().map(|t| t.dtype.as_str()) {
        Some("f64") => DType::F64,
        _ => DType::F32,
    };
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let Some(chunk) = payload.get(entry.offset..entry.offset + entry.bytes) else {
            return Err(Error::Integrity(format!("tensor {} lies outside the payload", entry.name)));
        };
        tensors.push((entry.name.clone(), tensor_from_bytes(entry, chunk)?));
    }
    let mut model = StyleModel::new(&header.config, dtype)?;
    model
        .load_tensors(&tensors)
        .map_err(|e| Error::Integrity(format!("tensor set does not fit the stored config: {e}")))?;
    model.stage = header.stage;
    model.iteration = header.iteration;
    model.offset = header.offset;
    Ok(model)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(model: &StyleModel, path: impl AsRef<Path>) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<StyleModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

/// SHA-256 of a checkpoint file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Refuses to resume from a checkpoint written under a different config
/// unless `force` is set, in which case it only warns.
pub fn check_resume(model: &StyleModel, config: &RunConfig, force: bool) -> Result<()> {
    let (checkpoint, config_hash) = (model.config.hash(), config.hash());
    if checkpoint == config_hash {
        return Ok(());
    }
    if force {
        log::warn!("resuming from a checkpoint with config hash {checkpoint}, run config is {config_hash}");
        return Ok(());
    }
    Err(Error::ConfigMismatch {
        checkpoint,
        config: config_hash,
    })
}
