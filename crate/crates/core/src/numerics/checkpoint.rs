//! Checkpoints are a directory holding `manifest.json` (name, shape, dtype,
//! byte offset of every array, plus free-form metadata) and `params.bin`, the
//! little-endian concatenation of all arrays.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NumericsError, Real, Result, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    blob_bytes: usize,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Loaded checkpoint: named tensors in manifest order plus metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub tensors: Vec<(String, Tensor<T>)>,
    pub meta: serde_json::Value,
}

impl<T: Real> Checkpoint<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor into the matching parameter of `params`, which
    /// must have identical names and shapes.
    pub fn restore_into(&self, names: &[String], params: Vec<&mut Tensor<T>>) -> Result<()> {
        if names.len() != params.len() {
            return Err(NumericsError::Checkpoint("name list does not match parameters".into()));
        }
        for (name, p) in names.iter().zip(params) {
            let t = self
                .get(name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape(),
                    p.shape()
                )));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Real>(dir: &Path, tensors: &[(String, &Tensor<T>)], meta: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(ManifestEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE.to_string(),
            offset: blob.len(),
        });
        for &v in t.data() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        entries,
        blob_bytes: blob.len(),
        meta,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    fs::write(dir.join(BLOB_FILE), &blob)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<Checkpoint<T>> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| NumericsError::Checkpoint(e.to_string()))?;
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() != manifest.blob_bytes {
        return Err(NumericsError::Checkpoint(format!(
            "blob has {} bytes, manifest says {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.entries.len());
    for e in manifest.entries {
        if e.dtype != T::DTYPE {
            return Err(NumericsError::Checkpoint(format!(
                "{}: stored as {}, requested {}",
                e.name,
                e.dtype,
                T::DTYPE
            )));
        }
        let n: usize = e.shape.iter().product();
        let end = e.offset + n * T::BYTES;
        if end > blob.len() {
            return Err(NumericsError::Checkpoint(format!("{}: range past end of blob", e.name)));
        }
        let data = blob[e.offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        tensors.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok(Checkpoint {
        tensors,
        meta: manifest.meta,
    })
}
