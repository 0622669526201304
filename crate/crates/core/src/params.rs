//! Named parameter tensors and the on-disk weight format.
//!
//! A weight file is a UTF-8 JSON manifest next to one little-endian `f32`
//! blob:
//!
//! ```json
//! {
//!   "blob": "weights.bin",
//!   "metadata": { "patch_size": 16.0 },
//!   "tensors": [ { "name": "fgsa.w_k.0", "shape": [9, 16], "dtype": "f32", "byte_offset": 0 } ]
//! }
//! ```
//!
//! Tensors are packed back to back in manifest order; the loader rejects a
//! blob whose length differs from the sum of the shape products.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ConvWeights;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", format!("{shape:?} = {n} values"), format!("{} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(v: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub blob: String,
    #[serde(default)]
    pub metadata: BTreeMap<String, f64>,
    pub tensors: Vec<ManifestEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a tensor; a name may only be inserted once.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Param(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: f64) {
        self.metadata.insert(key.into(), value);
    }

    pub fn metadata(&self) -> &BTreeMap<String, f64> {
        &self.metadata
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Param(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Fetches a tensor and checks its shape.
    pub fn get_shaped(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::shape("ParamStore::get_shaped", format!("`{name}` with shape {shape:?}"), format!("{:?}", t.shape)));
        }
        Ok(t)
    }

    pub fn scalar(&self, name: &str) -> Result<f32> {
        Ok(self.get_shaped(name, &[1])?.data[0])
    }

    /// Reads convolution weights `name` (shape `[kh, kw, cin, cout]`) and its
    /// bias `name.bias` (shape `[cout]`).
    pub fn conv(&self, name: &str) -> Result<ConvWeights> {
        let w = self.get(name)?;
        let [kh, kw, cin, cout] = w.shape[..] else {
            return Err(Error::Param(format!("`{name}` must be rank 4 [kh, kw, cin, cout], got {:?}", w.shape)));
        };
        let b = self.get_shaped(&format!("{name}.bias"), &[cout])?;
        ConvWeights::new(kh, kw, cin, cout, w.data.clone(), b.data.clone())
    }

    pub fn insert_conv(&mut self, name: &str, conv: ConvWeights) -> Result<()> {
        self.insert(
            name,
            Tensor::new(vec![conv.kh, conv.kw, conv.cin, conv.cout], conv.weights)?,
        )?;
        self.insert(format!("{name}.bias"), Tensor::new(vec![conv.cout], conv.bias)?)
    }

    /// Writes `<stem>.json` and `<stem>.bin` into `dir`; returns the manifest path.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<std::path::PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let blob_name = format!("{stem}.bin");
        let mut blob = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            tensors.push(ManifestEntry {
                name: name.clone(),
                shape: t.shape.clone(),
                dtype: "f32".into(),
                byte_offset: blob.len() as u64,
            });
            for v in &t.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            blob: blob_name.clone(),
            metadata: self.metadata.clone(),
            tensors,
        };
        let blob_path = dir.join(&blob_name);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let manifest_path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&manifest).map_err(|source| Error::Json {
            path: manifest_path.clone(),
            source,
        })?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        Ok(manifest_path)
    }

    /// Loads a manifest and its blob, which is resolved relative to the
    /// manifest's directory.
    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: manifest_path.to_path_buf(),
            source,
        })?;
        let blob_path = manifest_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Self::from_manifest(&manifest, &blob)
    }

    pub fn from_manifest(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() * 4)
            .sum();
        if blob.len() != expected {
            return Err(Error::Format(format!(
                "weight blob holds {} bytes but the manifest declares {expected}",
                blob.len()
            )));
        }
        let mut store = ParamStore::new();
        store.metadata = manifest.metadata.clone();
        for entry in &manifest.tensors {
            if entry.dtype != "f32" {
                return Err(Error::Format(format!("`{}` has unsupported dtype `{}`", entry.name, entry.dtype)));
            }
            let n: usize = entry.shape.iter().product();
            let start = entry.byte_offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(Error::Format(format!("`{}` extends past the end of the blob", entry.name)));
            }
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
        }
        Ok(store)
    }
}
