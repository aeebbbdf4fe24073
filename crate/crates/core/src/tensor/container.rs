//! Single-file tensor container used for checkpoints and fragment heatmaps.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0       8 bytes   magic  b"PRTNSR01"
//! 8       u64       manifest length M in bytes
//! 16      M bytes   UTF-8 JSON manifest
//! 16+M    ...       data section: raw f32 LE buffers
//! ```
//!
//! The manifest is `{"meta": {..}, "tensors": [{"name", "dtype", "shape",
//! "offset"}]}` where `offset` is the byte offset of a tensor's buffer relative
//! to the start of the data section and `dtype` is always `"f32"`. Buffers are
//! written in manifest order with no padding. Round trips are bit-exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::value::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PRTNSR01";

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
    tensors: Vec<Entry>,
}

/// Named tensors plus free-form metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<(String, Tensor)>,
}

impl TensorFile {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0u64;
        let entries = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = Entry {
                    name: name.clone(),
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel() as u64;
                e
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors: entries,
        })
        .expect("manifest serialization cannot fail");
        let mut out = Vec::with_capacity(16 + manifest.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: &str| Error::Container {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(mlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("manifest length exceeds file size"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| bad(&format!("manifest is not valid JSON: {e}")))?;
        let data = &bytes[data_start..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            if e.dtype != "f32" {
                return Err(bad(&format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * numel;
            if end > data.len() {
                return Err(bad(&format!("tensor `{}` runs past end of file", e.name)));
            }
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push((e.name, Tensor::new(&e.shape, values)?));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
