//! Single-file checkpoints: the 8-byte magic `MIQM0001`, a UTF-8 JSON
//! manifest, then raw little-endian f32 tensor data. The data section and
//! every tensor offset inside it are 64-byte aligned.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"MIQM0001";
const ALIGN: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Relative to the start of the data section.
    pub offset: u64,
    pub byte_length: u64,
    pub metric: String,
    pub layer: String,
    pub init_seed: u64,
    pub config_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub metric: String,
    pub init_seed: u64,
    pub config_digest: String,
    pub step: u64,
    pub epoch: u64,
    /// Free-form run information (effective config, scores, ...).
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// A tensor waiting to be written, tagged with the layer it belongs to.
pub struct Record {
    pub name: String,
    pub layer: String,
    pub tensor: Tensor,
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Lays out `records` and returns the file bytes. `manifest.tensors` is
/// filled in here; pass it empty.
pub fn encode(mut manifest: Manifest, records: &[Record]) -> Result<Vec<u8>> {
    let mut data = Vec::new();
    manifest.tensors.clear();
    for r in records {
        let values = r.tensor.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        data.resize(align(data.len()), 0);
        let offset = data.len() as u64;
        for v in &values {
            data.extend_from_slice(&v.to_le_bytes());
        }
        manifest.tensors.push(TensorEntry {
            name: r.name.clone(),
            dtype: "f32".into(),
            shape: r.tensor.dims().to_vec(),
            offset,
            byte_length: (values.len() * 4) as u64,
            metric: manifest.metric.clone(),
            layer: r.layer.clone(),
            init_seed: manifest.init_seed,
            config_digest: manifest.config_digest.clone(),
        });
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(ALIGN + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&json);
    out.push(b'\n');
    out.resize(align(out.len()), 0);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let mut stream = serde_json::Deserializer::from_slice(rest).into_iter::<Manifest>();
    let manifest = stream
        .next()
        .ok_or_else(|| Error::Checkpoint("missing manifest".into()))??;
    let data_start = align(MAGIC.len() + stream.byte_offset() + 1);
    let data = bytes
        .get(data_start..)
        .ok_or_else(|| Error::Checkpoint("truncated before tensor data".into()))?;
    let mut tensors = BTreeMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f32" {
            return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        let (start, len) = (e.offset as usize, e.byte_length as usize);
        if len != numel * 4 || start % ALIGN != 0 {
            return Err(Error::Checkpoint(format!("{}: inconsistent entry", e.name)));
        }
        let raw = data
            .get(start..start + len)
            .ok_or_else(|| Error::Checkpoint(format!("{}: truncated tensor data", e.name)))?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        tensors.insert(e.name.clone(), Tensor::from_vec(values, e.shape.as_slice(), &Device::Cpu)?);
    }
    Ok((manifest, tensors))
}

/// Writes through a temporary file and renames, so an interrupted write
/// never replaces a good checkpoint.
pub fn write(path: impl AsRef<Path>, manifest: Manifest, records: &[Record]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(manifest, records)?;
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read(path: impl AsRef<Path>) -> Result<(Manifest, BTreeMap<String, Tensor>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Hex SHA-256 of a file, used for reproducibility checks.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Short stable digest of any serialisable config.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    Ok(hex::encode(&Sha256::digest(&json)[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> Manifest {
        Manifest {
            metric: "mae".into(),
            init_seed: 7,
            config_digest: "abc".into(),
            step: 3,
            epoch: 1,
            meta: serde_json::json!({"note": "x"}),
            tensors: vec![],
        }
    }

    #[test]
    fn roundtrip_is_exact_and_aligned() {
        let a = Tensor::new(&[1.5f32, -2.0, 3.25], &Device::Cpu).unwrap();
        let b = Tensor::new(&[[0.1f32; 5]; 2], &Device::Cpu).unwrap();
        let recs = [
            Record {
                name: "a".into(),
                layer: "image".into(),
                tensor: a.clone(),
            },
            Record {
                name: "b".into(),
                layer: "relu1_2".into(),
                tensor: b.clone(),
            },
        ];
        let bytes = encode(manifest(), &recs).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let (m, t) = decode(&bytes).unwrap();
        assert_eq!(m.step, 3);
        assert!(m.tensors.iter().all(|e| e.offset % 64 == 0));
        assert_eq!(m.tensors[1].layer, "relu1_2");
        assert_eq!(t["a"].to_vec1::<f32>().unwrap(), a.to_vec1::<f32>().unwrap());
        assert_eq!(t["b"].to_vec2::<f32>().unwrap(), b.to_vec2::<f32>().unwrap());
        // encoding is a pure function of its inputs
        assert_eq!(bytes, encode(manifest(), &recs).unwrap());
    }

    #[test]
    fn rejects_garbage_and_truncation() {
        assert!(decode(b"NOTACKPT{}").is_err());
        let a = Tensor::new(&[1.0f32; 40], &Device::Cpu).unwrap();
        let bytes = encode(
            manifest(),
            &[Record {
                name: "a".into(),
                layer: "x".into(),
                tensor: a,
            }],
        )
        .unwrap();
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
    }
}
