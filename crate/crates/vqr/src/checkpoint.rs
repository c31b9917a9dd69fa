//! Model checkpoints: a shape-prefixed little-endian binary tensor
//! archive plus a JSON manifest carrying SHA-256 digests of each tensor
//! and of the whole archive. Loading verifies every digest.
//!
//! Optimizer state (Adam moments and step count) is stored in the same
//! archive under the `opt.` prefix so a warm start replays exactly.

use crate::nn::{hex_string, Adam, ParamStore};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const ARCHIVE_FILE: &str = "tensors.bin";
pub const MANIFEST_FILE: &str = "manifest.json";
const ARCHIVE_MAGIC: &[u8; 4] = b"VQRT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint corruption: {0}")]
    Corruption(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub archive_file: String,
    pub archive_sha256: String,
    pub tensors: Vec<TensorInfo>,
    pub frozen: bool,
    /// Model-specific configuration and provenance.
    pub meta: serde_json::Value,
}

fn tensor_digest(value: &Array2<f64>) -> String {
    let mut h = Sha256::new();
    h.update((value.nrows() as u64).to_le_bytes());
    h.update((value.ncols() as u64).to_le_bytes());
    for &x in value.iter() {
        h.update(x.to_le_bytes());
    }
    hex_string(&h.finalize())
}

fn encode_archive(tensors: &[(String, Array2<f64>)]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(ARCHIVE_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, value) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
        buf.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
        for &x in value.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    buf
}

fn decode_archive(bytes: &[u8]) -> Result<Vec<(String, Array2<f64>)>, CheckpointError> {
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *at + n > bytes.len() {
            return Err(CheckpointError::Format("archive is truncated".into()));
        }
        let s = &bytes[*at..*at + n];
        *at += n;
        Ok(s)
    };
    if take(&mut at, 4)? != ARCHIVE_MAGIC {
        return Err(CheckpointError::Format("bad archive magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported archive version {version}"
        )));
    }
    let count = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut at, name_len)?.to_vec())
            .map_err(|e| CheckpointError::Format(format!("bad tensor name: {e}")))?;
        let rows = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let cols = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap()) as usize;
        let data = take(&mut at, rows * cols * 8)?;
        let mut value = Array2::zeros((rows, cols));
        for (i, chunk) in data.chunks_exact(8).enumerate() {
            value[[i / cols.max(1), i % cols.max(1)]] =
                f64::from_le_bytes(chunk.try_into().unwrap());
        }
        out.push((name, value));
    }
    if at != bytes.len() {
        return Err(CheckpointError::Format(
            "trailing bytes after last tensor".into(),
        ));
    }
    Ok(out)
}

/// Write a checkpoint directory. Parameters keep their store order;
/// optimizer state, when given, follows under the `opt.` prefix.
pub fn save_checkpoint(
    dir: impl AsRef<Path>,
    kind: &str,
    frozen: bool,
    meta: serde_json::Value,
    params: &ParamStore,
    optimizer: Option<&Adam>,
) -> Result<(), CheckpointError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut tensors: Vec<(String, Array2<f64>)> = params
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    if let Some(adam) = optimizer {
        tensors.push((
            "opt.step".into(),
            Array2::from_elem((1, 1), adam.step_count as f64),
        ));
        for (i, (name, _)) in params.iter().enumerate() {
            tensors.push((format!("opt.m.{name}"), adam.m[i].clone()));
            tensors.push((format!("opt.v.{name}"), adam.v[i].clone()));
        }
    }
    let archive = encode_archive(&tensors);
    let archive_sha256 = hex_string(&Sha256::digest(&archive));
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        kind: kind.to_string(),
        archive_file: ARCHIVE_FILE.into(),
        archive_sha256,
        tensors: tensors
            .iter()
            .map(|(name, value)| TensorInfo {
                name: name.clone(),
                rows: value.nrows(),
                cols: value.ncols(),
                sha256: tensor_digest(value),
            })
            .collect(),
        frozen,
        meta,
    };
    let mut f = fs::File::create(dir.join(ARCHIVE_FILE))?;
    f.write_all(&archive)?;
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), manifest_json)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub manifest: CheckpointManifest,
    /// Model parameters in archive order (without the `opt.` entries).
    pub params: Vec<(String, Array2<f64>)>,
    pub optimizer: Option<LoadedOptimizerState>,
}

pub struct LoadedOptimizerState {
    pub step_count: u64,
    /// `(param name, first moment, second moment)` in parameter order.
    pub moments: Vec<(String, Array2<f64>, Array2<f64>)>,
}

/// Read and verify a checkpoint directory. Any digest mismatch is a
/// corruption error.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<LoadedCheckpoint, CheckpointError> {
    let dir = dir.as_ref();
    let manifest_json = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest = serde_json::from_str(&manifest_json)
        .map_err(|e| CheckpointError::Format(format!("bad manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported manifest version {}",
            manifest.format_version
        )));
    }
    let mut archive = Vec::new();
    fs::File::open(dir.join(&manifest.archive_file))?.read_to_end(&mut archive)?;
    let archive_sha256 = hex_string(&Sha256::digest(&archive));
    if archive_sha256 != manifest.archive_sha256 {
        return Err(CheckpointError::Corruption(format!(
            "archive digest {archive_sha256} does not match manifest {}",
            manifest.archive_sha256
        )));
    }
    let tensors = decode_archive(&archive)?;
    if tensors.len() != manifest.tensors.len() {
        return Err(CheckpointError::Corruption(format!(
            "archive holds {} tensors, manifest declares {}",
            tensors.len(),
            manifest.tensors.len()
        )));
    }
    for ((name, value), info) in tensors.iter().zip(&manifest.tensors) {
        if name != &info.name || value.nrows() != info.rows || value.ncols() != info.cols {
            return Err(CheckpointError::Corruption(format!(
                "tensor {name} does not match manifest entry {}",
                info.name
            )));
        }
        let d = tensor_digest(value);
        if d != info.sha256 {
            return Err(CheckpointError::Corruption(format!(
                "tensor {name} digest {d} does not match manifest {}",
                info.sha256
            )));
        }
    }

    let mut params = Vec::new();
    let mut step_count = None;
    let mut m_by_name: Vec<(String, Array2<f64>)> = Vec::new();
    let mut v_by_name: Vec<(String, Array2<f64>)> = Vec::new();
    for (name, value) in tensors {
        if name == "opt.step" {
            step_count = Some(value[[0, 0]] as u64);
        } else if let Some(rest) = name.strip_prefix("opt.m.") {
            m_by_name.push((rest.to_string(), value));
        } else if let Some(rest) = name.strip_prefix("opt.v.") {
            v_by_name.push((rest.to_string(), value));
        } else {
            params.push((name, value));
        }
    }
    let optimizer = match step_count {
        None => None,
        Some(step_count) => {
            if m_by_name.len() != params.len() || v_by_name.len() != params.len() {
                return Err(CheckpointError::Corruption(
                    "optimizer state does not cover every parameter".into(),
                ));
            }
            let mut moments = Vec::with_capacity(params.len());
            for (i, (pname, _)) in params.iter().enumerate() {
                if &m_by_name[i].0 != pname || &v_by_name[i].0 != pname {
                    return Err(CheckpointError::Corruption(format!(
                        "optimizer moment order diverges at {pname}"
                    )));
                }
                moments.push((
                    pname.clone(),
                    m_by_name[i].1.clone(),
                    v_by_name[i].1.clone(),
                ));
            }
            Some(LoadedOptimizerState {
                step_count,
                moments,
            })
        }
    };
    Ok(LoadedCheckpoint {
        manifest,
        params,
        optimizer,
    })
}

/// Install loaded tensors into a freshly constructed store with the same
/// parameter names.
pub fn restore_params(
    store: &mut ParamStore,
    loaded: &[(String, Array2<f64>)],
) -> Result<(), CheckpointError> {
    if loaded.len() != store.len() {
        return Err(CheckpointError::Corruption(format!(
            "checkpoint has {} parameters, model expects {}",
            loaded.len(),
            store.len()
        )));
    }
    for (name, value) in loaded {
        let id = store.id_of(name).ok_or_else(|| {
            CheckpointError::Corruption(format!("unexpected parameter {name}"))
        })?;
        if store.get(id).dim() != value.dim() {
            return Err(CheckpointError::Corruption(format!(
                "parameter {name} has shape {:?}, model expects {:?}",
                value.dim(),
                store.get(id).dim()
            )));
        }
        store.set(id, value.clone());
    }
    Ok(())
}
