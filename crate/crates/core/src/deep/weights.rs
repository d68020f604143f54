//! Frozen weight blobs described by a JSON manifest.
//!
//! Each blob is a raw little-endian f32 file. The manifest records, per blob,
//! its path (relative to the manifest), shape, byte length and SHA-256 so a
//! truncated or swapped file is rejected before use.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT: &str = "vismask-weights-1";

/// Per-channel input normalisation of the backbone's training corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for InputNorm {
    /// ImageNet statistics.
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub path: PathBuf,
    pub shape: Vec<usize>,
    pub byte_length: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub format: String,
    #[serde(default)]
    pub input_norm: InputNorm,
    pub blobs: Vec<BlobEntry>,
}

/// Named, immutable tensors loaded from a manifest.
#[derive(Clone, Debug, Default)]
pub struct WeightStore {
    pub input_norm: InputNorm,
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new(input_norm: InputNorm) -> Self {
        Self {
            input_norm,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Weights(format!("weight '{name}' not present in manifest")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Loads and verifies every blob listed in the manifest.
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: WeightsManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Weights(format!("{}: {e}", manifest_path.display())))?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::Weights(format!(
                "unsupported manifest format '{}'",
                manifest.format
            )));
        }
        let base = manifest_path.parent().unwrap_or(Path::new("."));
        let mut store = Self::new(manifest.input_norm.clone());
        for blob in &manifest.blobs {
            let path = base.join(&blob.path);
            let bytes = fs::read(&path)
                .map_err(|e| Error::Weights(format!("missing weight file {}: {e}", path.display())))?;
            if bytes.len() as u64 != blob.byte_length {
                return Err(Error::Weights(format!(
                    "{}: expected {} bytes, found {}",
                    path.display(),
                    blob.byte_length,
                    bytes.len()
                )));
            }
            let digest = hex::encode(Sha256::digest(&bytes));
            if !digest.eq_ignore_ascii_case(&blob.sha256) {
                return Err(Error::Weights(format!(
                    "{}: content hash mismatch (corrupt weight file)",
                    path.display()
                )));
            }
            let numel: usize = blob.shape.iter().product();
            if numel * 4 != bytes.len() {
                return Err(Error::Weights(format!(
                    "{}: shape {:?} does not match {} bytes of f32",
                    path.display(),
                    blob.shape,
                    bytes.len()
                )));
            }
            let values: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, blob.shape.as_slice(), &Device::Cpu)?;
            store.insert(blob.name.clone(), t);
        }
        Ok(store)
    }

    /// Writes one blob per tensor plus `manifest.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blobs = Vec::new();
        for (name, t) in &self.tensors {
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            let file = PathBuf::from(format!("{name}.f32"));
            let path = dir.join(&file);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            blobs.push(BlobEntry {
                name: name.clone(),
                path: file,
                shape: t.dims().to_vec(),
                byte_length: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = WeightsManifest {
            format: MANIFEST_FORMAT.into(),
            input_norm: self.input_norm.clone(),
            blobs,
        };
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// SHA-256 over every tensor's bytes in name order.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, t) in &self.tensors {
            h.update(name.as_bytes());
            for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}
