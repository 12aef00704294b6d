//! Checkpoint format: a JSON manifest mapping tensor names to
//! {shape, dtype, byte_offset, byte_len}, the model config embedded
//! alongside, and a raw little-endian blob file with the values.
//!
//! `<prefix>.json` holds the manifest, `<prefix>.bin` the blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::store::ParamStore;
use super::tensor::Tensor;
use super::{Real, DTYPE, DTYPE_BYTES};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_len: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub dtype: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, TensorRecord>,
}

fn manifest_path(prefix: &Path) -> std::path::PathBuf {
    std::path::PathBuf::from(format!("{}.json", prefix.display()))
}

fn blob_path(prefix: &Path) -> std::path::PathBuf {
    std::path::PathBuf::from(format!("{}.bin", prefix.display()))
}

pub fn save_checkpoint(prefix: &Path, config: &serde_json::Value, store: &ParamStore) -> Result<()> {
    let mut tensors = BTreeMap::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, param) in store.iter() {
        let t = &param.value;
        let byte_offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.insert(
            name.to_string(),
            TensorRecord {
                shape: vec![t.rows(), t.cols()],
                dtype: DTYPE.to_string(),
                byte_offset,
                byte_len: (t.len() * DTYPE_BYTES) as u64,
            },
        );
    }
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        dtype: DTYPE.to_string(),
        config: config.clone(),
        tensors,
    };
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(manifest_path(prefix), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(blob_path(prefix), blob)?;
    Ok(())
}

pub fn load_checkpoint(prefix: &Path) -> Result<(serde_json::Value, ParamStore)> {
    let manifest: CheckpointManifest =
        serde_json::from_slice(&fs::read(manifest_path(prefix))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} unsupported",
            manifest.version
        )));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Format(format!(
            "checkpoint dtype {} does not match build dtype {}",
            manifest.dtype, DTYPE
        )));
    }
    let blob = fs::read(blob_path(prefix))?;
    let mut store = ParamStore::new();
    for (name, rec) in &manifest.tensors {
        if rec.shape.len() != 2 {
            return Err(Error::Format(format!(
                "tensor {name} has rank {} (expected 2)",
                rec.shape.len()
            )));
        }
        let n = rec.shape[0] * rec.shape[1];
        if rec.byte_len as usize != n * DTYPE_BYTES || rec.dtype != DTYPE {
            return Err(Error::Format(format!(
                "tensor {name}: inconsistent record {:?}",
                rec
            )));
        }
        let lo = rec.byte_offset as usize;
        let hi = lo + rec.byte_len as usize;
        if hi > blob.len() {
            return Err(Error::Format(format!(
                "tensor {name}: blob range {lo}..{hi} out of {} bytes",
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in blob[lo..hi].chunks_exact(DTYPE_BYTES) {
            data.push(Real::from_le_bytes(chunk.try_into().unwrap()));
        }
        store.insert(name, Tensor::from_vec(rec.shape[0], rec.shape[1], data)?);
    }
    Ok((manifest.config, store))
}
