//! `CLPCKPT1` checkpoint files.
//!
//! Layout: the 8-byte magic, a little-endian `u64` header length, a JSON
//! header, then every tensor's values as little-endian blobs in manifest
//! order. Offsets in the manifest are relative to the start of the blob
//! section.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ClpError, Result};
use crate::model::{Block, LowRankAdapter, ModelSpec, TransformerLM, ADAPTED_PROJECTIONS, BLOCK_PARAM_NAMES};
use crate::prune::PrunedModelMeta;
use crate::tensor::{Real, Tensor, REAL_DTYPE};

pub const MAGIC: &[u8; 8] = b"CLPCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: u32,
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    /// Set when the model was produced by excising a window.
    pub pruned: Option<PrunedModelMeta>,
    /// Hash of the run configuration that produced the file.
    pub config_hash: Option<String>,
    /// Model checksum over names, shapes and values.
    pub checksum: String,
}

/// A model with the provenance stored next to it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TransformerLM,
    pub pruned: Option<PrunedModelMeta>,
    pub config_hash: Option<String>,
}

fn dtype_size(dtype: &str) -> Result<usize> {
    match dtype {
        "f64" => Ok(8),
        "f32" => Ok(4),
        other => Err(ClpError::Checkpoint(format!("unsupported dtype {other}"))),
    }
}

/// Serialises a checkpoint to bytes.
pub fn to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let elem = dtype_size(REAL_DTYPE)?;
    let mut offset = 0u64;
    let named = ckpt.model.named_parameters();
    let tensors = named
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.clone(),
                dtype: REAL_DTYPE.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += (t.numel() * elem) as u64;
            entry
        })
        .collect();
    let header = Header {
        version: FORMAT_VERSION,
        spec: ckpt.model.spec.clone(),
        tensors,
        pruned: ckpt.pruned.clone(),
        config_hash: ckpt.config_hash.clone(),
        checksum: ckpt.model.checksum(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn truncated(what: &str) -> ClpError {
    ClpError::Checkpoint(format!("file truncated while reading {what}"))
}

/// Reads only the JSON header.
pub fn read_header(bytes: &[u8]) -> Result<(Header, usize)> {
    if bytes.len() < 8 {
        return Err(truncated("magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(ClpError::Checkpoint("not a CLPCKPT1 file (bad magic)".into()));
    }
    let len_bytes: [u8; 8] = bytes.get(8..16).ok_or_else(|| truncated("header length"))?.try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(16..16usize.saturating_add(len)).ok_or_else(|| truncated("header"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| ClpError::Checkpoint(format!("malformed header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(ClpError::Checkpoint(format!(
            "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
            header.version
        )));
    }
    Ok((header, 16 + len))
}

fn decode(entry: &TensorEntry, blobs: &[u8]) -> Result<Tensor> {
    let elem = dtype_size(&entry.dtype)?;
    let numel: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let raw = start
        .checked_add(numel * elem)
        .and_then(|end| blobs.get(start..end))
        .ok_or_else(|| truncated(&format!("tensor {}", entry.name)))?;
    let data: Vec<Real> = match entry.dtype.as_str() {
        "f64" => raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect(),
        _ => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as Real)
            .collect(),
    };
    Tensor::new(entry.shape.clone(), data).map_err(|e| ClpError::Checkpoint(format!("tensor {}: {e}", entry.name)))
}

/// Parses a checkpoint and verifies its checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, data_start) = read_header(bytes)?;
    header.spec.validate().map_err(|e| ClpError::Checkpoint(format!("invalid model spec: {e}")))?;
    let blobs = &bytes[data_start..];
    let mut tensors: HashMap<String, Tensor> = HashMap::new();
    let mut expected_len = 0usize;
    for entry in &header.tensors {
        let t = decode(entry, blobs)?;
        expected_len = expected_len.max(entry.offset as usize + t.numel() * dtype_size(&entry.dtype)?);
        tensors.insert(entry.name.clone(), t);
    }
    if blobs.len() != expected_len {
        return Err(ClpError::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            blobs.len().saturating_sub(expected_len)
        )));
    }
    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| ClpError::Checkpoint(format!("missing tensor {name}")))
    };
    let spec = header.spec.clone();
    let tok_emb = take("tok_emb")?;
    let pos_emb = take("pos_emb")?;
    let mut blocks = Vec::with_capacity(spec.num_layers);
    for i in 0..spec.num_layers {
        let params = BLOCK_PARAM_NAMES
            .iter()
            .map(|n| take(&format!("layers.{i}.{n}")))
            .collect::<Result<Vec<_>>>()?;
        let adapted = header
            .tensors
            .iter()
            .any(|e| e.name.starts_with(&format!("layers.{i}.")) && e.name.ends_with(".lora_down"));
        let adapters = if adapted {
            Some(
                ADAPTED_PROJECTIONS
                    .iter()
                    .map(|(proj, _)| {
                        Ok(LowRankAdapter {
                            down: take(&format!("layers.{i}.{proj}.lora_down"))?,
                            up: take(&format!("layers.{i}.{proj}.lora_up"))?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        blocks.push(Block { params, adapters });
    }
    let model = TransformerLM {
        spec,
        tok_emb,
        pos_emb,
        blocks,
        lnf_gamma: take("ln_f.gamma")?,
        lnf_beta: take("ln_f.beta")?,
        head: take("head")?,
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(ClpError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    let actual = model.checksum();
    if actual != header.checksum {
        return Err(ClpError::Checkpoint(format!(
            "checksum mismatch: header says {}, contents hash to {actual}",
            header.checksum
        )));
    }
    Ok(Checkpoint {
        model,
        pruned: header.pruned,
        config_hash: header.config_hash,
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| ClpError::io(parent, e))?;
    }
    fs::write(path, to_bytes(ckpt)?).map_err(|e| ClpError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ClpError::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        ClpError::Checkpoint(msg) => ClpError::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}
