//! Tensor container used for model checkpoints and optimizer sidecars.
//!
//! Layout: `b"MGCK"`, `u32` format version, `u64` header length, the JSON
//! header, then the raw little-endian tensor blobs back to back. Every
//! manifest entry carries its byte offset (relative to the first blob) and a
//! SHA-256 of its bytes, so corruption is reported with a location.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::{Model, ModelConfig};
use crate::error::{ensure, Error, Result};
use crate::fsutil;
use crate::params::ParamStore;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"MGCK";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64-le";
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContainerKind {
    Model,
    Optimizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: ContainerKind,
    pub model_config: ModelConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (epoch, step, validation score, ...).
    pub meta: serde_json::Value,
}

pub fn encode(
    kind: ContainerKind,
    model_config: &ModelConfig,
    tensors: &[(&str, &Matrix)],
    meta: serde_json::Value,
) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, m) in tensors {
        let start = blob.len();
        for v in m.as_slice() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: (*name).to_string(),
            shape: [m.rows(), m.cols()],
            dtype: DTYPE.to_string(),
            offset: start as u64,
            nbytes: (blob.len() - start) as u64,
            sha256: fsutil::sha256_hex(&blob[start..]),
        });
    }
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        kind,
        model_config: model_config.clone(),
        tensors: entries,
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Parses and integrity-checks a container. Tensors come back in manifest
/// order.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, Vec<(String, Matrix)>)> {
    ensure!(
        bytes.len() >= PREAMBLE && &bytes[..4] == MAGIC,
        Checkpoint,
        "not a checkpoint file (bad magic at byte 0)"
    );
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    ensure!(
        version == FORMAT_VERSION,
        Checkpoint,
        "unsupported format version {version} (expected {FORMAT_VERSION})"
    );
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let blob_start = PREAMBLE
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checkpoint(format!("header length {header_len} runs past end of file")))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREAMBLE..blob_start])
        .map_err(|e| Error::Checkpoint(format!("unreadable header at byte {PREAMBLE}: {e}")))?;
    ensure!(
        header.format_version == version,
        Checkpoint,
        "header version {} disagrees with preamble {version}",
        header.format_version
    );
    let blob = &bytes[blob_start..];
    let mut expected = 0u64;
    let mut out = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let at = blob_start as u64 + t.offset;
        ensure!(t.dtype == DTYPE, Checkpoint, "tensor {} has dtype {}, expected {DTYPE}", t.name, t.dtype);
        ensure!(
            t.offset == expected && t.nbytes == (t.shape[0] * t.shape[1] * 8) as u64,
            Checkpoint,
            "tensor {} manifest inconsistent at byte {at}",
            t.name
        );
        let end = (t.offset + t.nbytes) as usize;
        ensure!(
            end <= blob.len(),
            Checkpoint,
            "tensor {} truncated: needs bytes {at}..{}, file has {}",
            t.name,
            blob_start + end,
            bytes.len()
        );
        let raw = &blob[t.offset as usize..end];
        if fsutil::sha256_hex(raw) != t.sha256 {
            let bad = first_bad_value(raw, t);
            return Err(Error::Checkpoint(format!(
                "checksum mismatch in tensor {} (bytes {at}..{}){bad}",
                t.name,
                blob_start + end
            )));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data)?));
        expected = t.offset + t.nbytes;
    }
    ensure!(
        expected as usize == blob.len(),
        Checkpoint,
        "{} trailing bytes after last tensor at byte {}",
        blob.len() - expected as usize,
        blob_start + expected as usize
    );
    Ok((header, out))
}

fn first_bad_value(raw: &[u8], t: &TensorEntry) -> String {
    raw.chunks_exact(8)
        .position(|c| !f64::from_le_bytes(c.try_into().expect("8 bytes")).is_finite())
        .map(|i| format!("; first non-finite value in {} at element {i}", t.name))
        .unwrap_or_default()
}

pub fn read(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Matrix)>)> {
    decode(&fsutil::read(path)?).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Serializes every parameter of `model`, frozen ones included.
pub fn encode_model(model: &Model, meta: serde_json::Value) -> Result<Vec<u8>> {
    let tensors: Vec<(&str, &Matrix)> = model.params.iter().map(|(_, p)| (p.name.as_str(), &p.value)).collect();
    encode(ContainerKind::Model, &model.config, &tensors, meta)
}

pub fn save_model(path: &Path, model: &Model, meta: serde_json::Value) -> Result<()> {
    fsutil::atomic_write(path, &encode_model(model, meta)?)
}

/// Rebuilds the model described in the header and loads its values. When
/// `expected` is given, the stored config must equal it.
pub fn decode_model(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Model, serde_json::Value)> {
    let (header, tensors) = decode(bytes)?;
    ensure!(
        header.kind == ContainerKind::Model,
        Checkpoint,
        "container holds {:?} state, not a model",
        header.kind
    );
    if let Some(cfg) = expected {
        ensure!(
            *cfg == header.model_config,
            Checkpoint,
            "checkpoint model config does not match the run config"
        );
    }
    let mut model =
        Model::new(header.model_config.clone()).map_err(|e| Error::Checkpoint(format!("stored model config: {e}")))?;
    load_into(&mut model.params, tensors)?;
    Ok((model, header.meta))
}

pub fn load_model(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, serde_json::Value)> {
    decode_model(&fsutil::read(path)?, expected).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn load_into(store: &mut ParamStore, tensors: Vec<(String, Matrix)>) -> Result<()> {
    ensure!(
        tensors.len() == store.len(),
        Checkpoint,
        "checkpoint has {} tensors, model has {}",
        tensors.len(),
        store.len()
    );
    let mut loaded = vec![false; store.len()];
    for (name, value) in tensors {
        let id = store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name}")))?;
        ensure!(!loaded[id.0], Checkpoint, "tensor {name} appears twice");
        let slot = store.value_mut(id);
        ensure!(
            slot.shape() == value.shape(),
            Checkpoint,
            "tensor {name} has shape {:?}, model expects {:?}",
            value.shape(),
            slot.shape()
        );
        *slot = value;
        loaded[id.0] = true;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Model {
        Model::new(ModelConfig {
            visual_width: 8,
            embed_dim: 8,
            text_width: 8,
            lora_rank: 2,
            ..ModelConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let mut model = tiny_model();
        let id = model.params.find("visual.proj_mid").unwrap();
        model.params.value_mut(id).as_mut_slice()[3] = 0.1 + 0.2;
        let bytes = encode_model(&model, serde_json::json!({"epoch": 3})).unwrap();
        let (back, meta) = decode_model(&bytes, Some(&model.config)).unwrap();
        assert_eq!(meta["epoch"], 3);
        for ((_, a), (_, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
    }

    #[test]
    fn flipped_blob_byte_is_reported_with_offset() {
        let model = tiny_model();
        let mut bytes = encode_model(&model, serde_json::Value::Null).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 0x40;
        let err = decode_model(&bytes, None).unwrap_err().to_string();
        assert!(err.contains("checksum mismatch"), "{err}");
        assert!(err.contains("bytes "), "{err}");
    }

    #[test]
    fn truncation_and_garbage_are_rejected() {
        let model = tiny_model();
        let bytes = encode_model(&model, serde_json::Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 8]).is_err());
        assert!(decode(&bytes[..10]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode(&extra).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode(&magic), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn config_mismatch_is_a_checkpoint_error() {
        let model = tiny_model();
        let bytes = encode_model(&model, serde_json::Value::Null).unwrap();
        let other = ModelConfig {
            lora_rank: 4,
            ..model.config.clone()
        };
        assert!(matches!(decode_model(&bytes, Some(&other)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn optimizer_container_is_not_a_model() {
        let model = tiny_model();
        let m = Matrix::zeros(1, 1);
        let bytes = encode(ContainerKind::Optimizer, &model.config, &[("m", &m)], serde_json::Value::Null).unwrap();
        assert!(decode(&bytes).is_ok());
        assert!(decode_model(&bytes, None).is_err());
    }
}
