//! Checkpoint files.
//!
//! ```text
//! "TDCK1\n"
//! u64 little-endian header length
//! header: UTF-8 JSON (version, config, vocabulary, tensor directory, metadata)
//! blob: little-endian f32 values, tensors back to back
//! ```
//!
//! Optimizer momentum is not stored; resuming from a checkpoint restarts
//! it at zero.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::model::{Model, ModelConfig};
use crate::text_encoder::Vocabulary;

pub const MAGIC: &[u8; 6] = b"TDCK1\n";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub epoch: usize,
    pub seed: u64,
    pub train_rpn: Option<f64>,
    pub train_align: Option<f64>,
    pub val_rpn: Option<f64>,
    pub val_align: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length.
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: ModelConfig,
    pub vocabulary: Vocabulary,
    pub tensors: Vec<TensorEntry>,
    pub metadata: CheckpointMetadata,
}

pub fn encode_checkpoint(model: &Model<f32>, metadata: &CheckpointMetadata) -> Vec<u8> {
    let mut tensors = Vec::with_capacity(model.params.len());
    let mut blob = Vec::with_capacity(model.params.num_elements() * 4);
    for (_, p) in model.params.iter() {
        let offset = blob.len();
        for v in p.tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            dtype: "f32".into(),
            shape: p.tensor.shape().to_vec(),
            offset,
            length: blob.len() - offset,
        });
    }
    let header = CheckpointHeader {
        version: VERSION,
        config: model.config.clone(),
        vocabulary: model.vocab.clone(),
        tensors,
        metadata: metadata.clone(),
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model<f32>, metadata: &CheckpointMetadata) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so a crash never leaves a half-written file behind
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(model, metadata)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Split a checkpoint into its header and blob, checking the framing.
pub fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8]), CheckpointError> {
    if bytes.len() < MAGIC.len() {
        return Err(CheckpointError::Truncated(format!("{} bytes is shorter than the magic", bytes.len())));
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let rest = &bytes[MAGIC.len()..];
    if rest.len() < 8 {
        return Err(CheckpointError::Truncated("missing header length".into()));
    }
    let len = u64::from_le_bytes(rest[..8].try_into().unwrap());
    let rest = &rest[8..];
    let len = usize::try_from(len)
        .ok()
        .filter(|&l| l <= rest.len())
        .ok_or_else(|| CheckpointError::Truncated(format!("header of {len} bytes but {} remain", rest.len())))?;
    let value: serde_json::Value =
        serde_json::from_slice(&rest[..len]).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| CheckpointError::CorruptHeader("missing version".into()))?;
    if version != VERSION as u64 {
        return Err(CheckpointError::UnsupportedVersion {
            found: version as u32,
            expected: VERSION,
        });
    }
    let header: CheckpointHeader =
        serde_json::from_value(value).map_err(|e| CheckpointError::CorruptHeader(e.to_string()))?;
    Ok((header, &rest[len..]))
}

/// Parse a checkpoint, rebuilding the architecture from `expected` (or the
/// embedded configuration) and validating every tensor against it.
pub fn decode_checkpoint(
    bytes: &[u8],
    expected: Option<&ModelConfig>,
) -> Result<(Model<f32>, CheckpointMetadata)> {
    let (header, blob) = decode_header(bytes)?;
    let config = expected.unwrap_or(&header.config);
    let mut model = Model::<f32>::new(config, header.vocabulary.clone(), 0)?;
    let mut directory: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for entry in &header.tensors {
        if entry.dtype != "f32" {
            return Err(CheckpointError::CorruptHeader(format!(
                "tensor `{}` has unsupported dtype {}",
                entry.name, entry.dtype
            ))
            .into());
        }
        if directory.insert(&entry.name, entry).is_some() {
            return Err(CheckpointError::CorruptHeader(format!("duplicate tensor `{}`", entry.name)).into());
        }
    }
    let ids: Vec<_> = model.params.iter().map(|(id, p)| (id, p.name.clone())).collect();
    for (id, name) in ids {
        let entry = directory
            .remove(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let want = model.params.tensor(id).shape().to_vec();
        if entry.shape != want {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: entry.shape.clone(),
                expected: want,
            }
            .into());
        }
        let n: usize = want.iter().product();
        if entry.length != 4 * n {
            return Err(CheckpointError::CorruptHeader(format!(
                "tensor `{name}` declares {} bytes for {n} values",
                entry.length
            ))
            .into());
        }
        let end = entry.offset.checked_add(entry.length).filter(|&e| e <= blob.len()).ok_or_else(|| {
            CheckpointError::Truncated(format!("tensor `{name}` extends past the end of the file"))
        })?;
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model.params.set(id, data)?;
    }
    if let Some(name) = directory.keys().next() {
        return Err(CheckpointError::UnexpectedTensor(name.to_string()).into());
    }
    if expected.is_some_and(|e| *e != header.config) {
        return Err(CheckpointError::ConfigMismatch(
            "checkpoint was trained with a different configuration".into(),
        )
        .into());
    }
    Ok((model, header.metadata))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model<f32>, CheckpointMetadata)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, None)
}

/// Load and require the architecture described by `expected`.
pub fn load_checkpoint_expecting(
    path: impl AsRef<Path>,
    expected: &ModelConfig,
) -> Result<(Model<f32>, CheckpointMetadata)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, Some(expected))
}
