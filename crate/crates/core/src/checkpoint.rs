//! Model checkpoints.
//!
//! Layout: one line of compact JSON (the header), a `\n`, then every
//! parameter as a little-endian `f32` in declaration order (per hop: the
//! weight matrix row-major, then the GAT attention vector). The header
//! records the byte offset of the parameter block and its SHA-256.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{ModelKind, ModelParams};
use crate::error::{Error, Result};
use crate::objective::Lambda;
use crate::training::TrainConfig;

pub const CHECKPOINT_FORMAT: &str = "gmvo-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub model: ModelKind,
    pub hops: usize,
    pub dims: Vec<usize>,
    pub lambda: Lambda,
    pub seed: u64,
    pub config: TrainConfig,
    pub param_count: usize,
    pub checksum: String,
    pub data_offset: usize,
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Serializes parameters (rounded to `f32`) and the training config.
pub fn encode_checkpoint(params: &ModelParams, config: &TrainConfig) -> Result<Vec<u8>> {
    let mut data = Vec::with_capacity(params.param_count() * 4);
    for tensor in params.tensors() {
        for &x in tensor {
            data.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let mut header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        model: params.kind(),
        hops: params.hops(),
        dims: params.dims(),
        lambda: config.lambda,
        seed: config.seed,
        config: config.clone(),
        param_count: params.param_count(),
        checksum: sha256_hex(&data),
        data_offset: 0,
    };
    // the offset's own digit count feeds back into the header length
    let mut json = serde_json::to_vec(&header)?;
    while header.data_offset != json.len() + 1 {
        header.data_offset = json.len() + 1;
        json = serde_json::to_vec(&header)?;
    }
    json.push(b'\n');
    json.extend_from_slice(&data);
    Ok(json)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, TrainConfig)> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header terminator".into()))?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    match raw.get("model").and_then(|m| m.as_str()) {
        Some(kind) => {
            kind.parse::<ModelKind>()?;
        }
        None => return Err(Error::MalformedHeader("missing model kind".into())),
    }
    let header: CheckpointHeader =
        serde_json::from_value(raw).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::MalformedHeader(format!("unexpected format `{}`", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.data_offset != newline + 1 {
        return Err(Error::MalformedHeader(format!(
            "data offset {} does not follow the header",
            header.data_offset
        )));
    }
    if header.hops + 1 != header.dims.len() || header.config.model_kind != header.model {
        return Err(Error::MalformedHeader("inconsistent model description".into()));
    }
    let data = &bytes[header.data_offset..];
    let expected = header.param_count * 4;
    if data.len() < expected {
        return Err(Error::TruncatedParameters);
    }
    if data.len() > expected {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes after the parameter block",
            data.len() - expected
        )));
    }
    if sha256_hex(data) != header.checksum {
        return Err(Error::ChecksumMismatch);
    }
    let template = ModelParams::init(header.model, &header.dims, 0)?;
    if template.param_count() != header.param_count {
        return Err(Error::MalformedHeader("parameter count does not match dims".into()));
    }
    let mut values = data
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])));
    let tensors = template
        .tensors()
        .iter()
        .map(|t| values.by_ref().take(t.len()).collect())
        .collect();
    let params = ModelParams::from_tensors(header.model, &header.dims, tensors)?;
    Ok((params, header.config))
}

pub fn save_checkpoint(params: &ModelParams, config: &TrainConfig, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params, config)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
