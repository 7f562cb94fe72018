//! Single-file tensor container.
//!
//! Layout: one line of JSON (the manifest), a newline, an 8-byte
//! little-endian blob length, then the raw blob. Each manifest entry names
//! a tensor, its row-major shape, its dtype and its byte offset into the
//! blob. Weights are stored as little-endian `f32`; quantized payloads use
//! `i8`. Saving the same container twice produces identical bytes.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    I8,
}

impl Dtype {
    fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::I8 => "i8",
        }
    }

    fn parse(s: &str) -> Option<Dtype> {
        match s {
            "f32" => Some(Dtype::F32),
            "i8" => Some(Dtype::I8),
            _ => None,
        }
    }

    fn bytes_per_value(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::I8 => 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: [usize; 2],
    dtype: String,
    offset_bytes: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    entries: Vec<ManifestEntry>,
    meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
struct StoredEntry {
    name: String,
    rows: usize,
    cols: usize,
    dtype: Dtype,
    offset: usize,
}

impl StoredEntry {
    fn byte_len(&self) -> usize {
        self.rows * self.cols * self.dtype.bytes_per_value()
    }
}

/// In-memory view of a container file.
#[derive(Debug, Clone, Default)]
pub struct TensorContainer {
    entries: Vec<StoredEntry>,
    index: BTreeMap<String, usize>,
    blob: Vec<u8>,
    meta: BTreeMap<String, String>,
}

impl TensorContainer {
    pub fn new() -> Self {
        TensorContainer::default()
    }

    /// Store a matrix as `f32`. Values are rounded to `f32` precision.
    pub fn insert(&mut self, name: &str, m: &Matrix) -> Result<()> {
        self.reserve(name, m.rows(), m.cols(), Dtype::F32)?;
        for &v in m.data() {
            self.blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(())
    }

    /// Store raw `i8` values (quantized weights).
    pub fn insert_i8(&mut self, name: &str, rows: usize, cols: usize, data: &[i8]) -> Result<()> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "entry '{name}': {} values cannot fill shape {rows}x{cols}",
                data.len()
            )));
        }
        self.reserve(name, rows, cols, Dtype::I8)?;
        self.blob.extend(data.iter().map(|&v| v as u8));
        Ok(())
    }

    fn reserve(&mut self, name: &str, rows: usize, cols: usize, dtype: Dtype) -> Result<usize> {
        if name.is_empty() {
            return Err(Error::invalid("tensor name must be non-empty".to_string()));
        }
        if self.index.contains_key(name) {
            return Err(Error::invalid(format!("duplicate tensor name '{name}'")));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("entry '{name}': zero dimension in {rows}x{cols}")));
        }
        let offset = self.blob.len();
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(StoredEntry { name: name.to_string(), rows, cols, dtype, offset });
        Ok(offset)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn shape(&self, name: &str) -> Option<(usize, usize)> {
        self.index.get(name).map(|&i| (self.entries[i].rows, self.entries[i].cols))
    }

    pub fn dtype(&self, name: &str) -> Option<Dtype> {
        self.index.get(name).map(|&i| self.entries[i].dtype)
    }

    /// Names in insertion order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn meta(&self) -> &BTreeMap<String, String> {
        &self.meta
    }

    pub fn set_meta(&mut self, key: &str, value: &str) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        self.meta.get(key).map(|s| s.as_str())
    }

    fn entry(&self, name: &str) -> Result<&StoredEntry> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i])
            .ok_or_else(|| Error::format(format!("tensor '{name}' not found in container")))
    }

    /// Load an `f32` tensor, widened to `f64`.
    pub fn get(&self, name: &str) -> Result<Matrix> {
        let e = self.entry(name)?;
        if e.dtype != Dtype::F32 {
            return Err(Error::format(format!(
                "tensor '{name}' has dtype {}, expected f32",
                e.dtype.as_str()
            )));
        }
        let bytes = &self.blob[e.offset..e.offset + e.byte_len()];
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Matrix::from_vec(e.rows, e.cols, data)
            .map_err(|err| Error::format(format!("tensor '{name}': {err}")))
    }

    pub fn get_i8(&self, name: &str) -> Result<(usize, usize, Vec<i8>)> {
        let e = self.entry(name)?;
        if e.dtype != Dtype::I8 {
            return Err(Error::format(format!(
                "tensor '{name}' has dtype {}, expected i8",
                e.dtype.as_str()
            )));
        }
        let bytes = &self.blob[e.offset..e.offset + e.byte_len()];
        Ok((e.rows, e.cols, bytes.iter().map(|&b| b as i8).collect()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            entries: self
                .entries
                .iter()
                .map(|e| ManifestEntry {
                    name: e.name.clone(),
                    shape: [e.rows, e.cols],
                    dtype: e.dtype.as_str().to_string(),
                    offset_bytes: e.offset as u64,
                })
                .collect(),
            meta: self.meta.clone(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serialization cannot fail");
        out.push(b'\n');
        out.extend_from_slice(&(self.blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format("missing manifest line terminator".to_string()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::format(format!("manifest is not valid JSON: {e}")))?;
        let rest = &bytes[nl + 1..];
        if rest.len() < 8 {
            return Err(Error::format("file truncated before blob length".to_string()));
        }
        let blob_len = u64::from_le_bytes(rest[..8].try_into().unwrap()) as usize;
        let blob = &rest[8..];
        if blob.len() != blob_len {
            return Err(Error::format(format!(
                "blob length field says {blob_len} bytes but file holds {}",
                blob.len()
            )));
        }

        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut index = BTreeMap::new();
        for e in &manifest.entries {
            let dtype = Dtype::parse(&e.dtype)
                .ok_or_else(|| Error::format(format!("entry '{}': unknown dtype '{}'", e.name, e.dtype)))?;
            let (rows, cols) = (e.shape[0], e.shape[1]);
            if rows == 0 || cols == 0 {
                return Err(Error::format(format!(
                    "entry '{}': zero dimension in {rows}x{cols}",
                    e.name
                )));
            }
            let stored = StoredEntry {
                name: e.name.clone(),
                rows,
                cols,
                dtype,
                offset: e.offset_bytes as usize,
            };
            let end = stored.offset.checked_add(stored.byte_len()).ok_or_else(|| {
                Error::format(format!("entry '{}': offset overflows", e.name))
            })?;
            if end > blob_len {
                return Err(Error::format(format!(
                    "entry '{}': bytes {}..{end} exceed blob of {blob_len}",
                    e.name, stored.offset
                )));
            }
            if index.insert(e.name.clone(), entries.len()).is_some() {
                return Err(Error::format(format!("duplicate tensor name '{}'", e.name)));
            }
            entries.push(stored);
        }

        // Entries must not overlap one another.
        let mut spans: Vec<(usize, usize, &str)> = entries
            .iter()
            .map(|e| (e.offset, e.offset + e.byte_len(), e.name.as_str()))
            .collect();
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::format(format!(
                    "entries '{}' and '{}' overlap in the blob",
                    w[0].2, w[1].2
                )));
            }
        }

        // Reject non-finite stored weights up front.
        for e in &entries {
            if e.dtype == Dtype::F32 {
                let bytes = &blob[e.offset..e.offset + e.byte_len()];
                for (i, c) in bytes.chunks_exact(4).enumerate() {
                    let v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                    if !v.is_finite() {
                        return Err(Error::format(format!(
                            "entry '{}': non-finite value {v} at flat index {i}",
                            e.name
                        )));
                    }
                }
            }
        }

        Ok(TensorContainer { entries, index, blob: blob.to_vec(), meta: manifest.meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}
