//! Portable tensor archives: `manifest.toml` (shapes, dtype, metadata) next
//! to `tensors.bin` (concatenated little-endian f64 values).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.toml";
pub const TENSORS: &str = "tensors.bin";
const DTYPE: &str = "f64-le";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset in elements into `tensors.bin`.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest<M> {
    kind: String,
    dtype: String,
    tensors_sha256: String,
    meta: M,
    tensor: Vec<TensorEntry>,
}

/// Writes `store` and `meta` to `dir` as an archive of the given kind.
pub fn save<M: Serialize>(dir: &Path, kind: &str, meta: &M, store: &ParamStore) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut entries = Vec::new();
    let mut offset = 0;
    for e in store.entries() {
        entries.push(TensorEntry {
            name: e.name.clone(),
            shape: e.tensor.shape().to_vec(),
            offset,
        });
        offset += e.tensor.len();
        for v in e.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        dtype: DTYPE.to_string(),
        tensors_sha256: hex::encode(Sha256::digest(&bytes)),
        meta,
        tensor: entries,
    };
    let path = dir.join(MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| Error::persistence(&path, e))?;
    std::fs::write(dir.join(TENSORS), &bytes).map_err(|e| Error::io(dir.join(TENSORS), e))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Whether `dir` holds an archive manifest.
pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST).is_file()
}

/// Reads an archive, checking its kind and payload checksum.
pub fn load<M: DeserializeOwned>(dir: &Path, kind: &str) -> Result<(M, Vec<(String, Tensor)>)> {
    let path = dir.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::Dependency(format!(
            "no {kind} archive at {}; train {kind} first",
            dir.display()
        )));
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest<M> = toml::from_str(&text).map_err(|e| Error::persistence(&path, e))?;
    if manifest.kind != kind {
        return Err(Error::persistence(
            &path,
            format!("archive kind {} where {kind} was expected", manifest.kind),
        ));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::persistence(&path, format!("unsupported dtype {}", manifest.dtype)));
    }
    let bin = dir.join(TENSORS);
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if hex::encode(Sha256::digest(&bytes)) != manifest.tensors_sha256 {
        return Err(Error::persistence(&bin, "checksum mismatch"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let mut tensors = Vec::with_capacity(manifest.tensor.len());
    for e in manifest.tensor {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(e.offset..e.offset + n)
            .ok_or_else(|| Error::persistence(&bin, format!("tensor {} out of range", e.name)))?
            .to_vec();
        tensors.push((e.name, Tensor::new(e.shape, data)));
    }
    Ok((manifest.meta, tensors))
}
