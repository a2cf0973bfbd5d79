//! Single-file model container.
//!
//! ```text
//! [8]  magic "GDQMODEL"
//! [8]  manifest length n, u64 little-endian
//! [n]  manifest, UTF-8 JSON
//! pad  zeros up to a 64-byte boundary (start of the data section)
//! data little-endian f32 blobs; every offset (relative to the data
//!      section) is a multiple of 64
//! ```
//!
//! The manifest holds `kind`, free-form `meta` (architecture, quantization
//! parameters) and a tensor table of `{name, shape, offset, dtype}`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"GDQMODEL";
pub const ALIGN: usize = 64;
const HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

impl Container {
    pub fn new(kind: impl Into<String>, meta: serde_json::Value) -> Self {
        Container {
            kind: kind.into(),
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        self.tensors.push(TensorEntry {
            name: name.into(),
            shape,
            data,
        });
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::load(name, "missing tensor"))
    }

    /// Fetch a tensor and check its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&TensorEntry> {
        let t = self.get(name)?;
        if t.shape != shape {
            return Err(Error::load(
                name,
                format!("shape {:?}, expected {:?}", t.shape, shape),
            ));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut records = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            let n: usize = t.shape.iter().product();
            if n != t.data.len() {
                return Err(Error::load(
                    &t.name,
                    format!("shape {:?} needs {n} values, has {}", t.shape, t.data.len()),
                ));
            }
            records.push(TensorRecord {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
                dtype: "f32".into(),
            });
            offset = align_up(offset + 4 * n);
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: 1,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            tensors: records.clone(),
        })?;
        let data_start = align_up(HEADER + manifest.len());
        let mut out = Vec::with_capacity(data_start + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.resize(data_start, 0);
        for (t, r) in self.tensors.iter().zip(&records) {
            out.resize(data_start + r.offset, 0);
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.resize(align_up(out.len()), 0);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..8] != MAGIC {
            return Err(Error::load("<header>", "bad magic, not a model container"));
        }
        let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_end = HEADER
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::load("<manifest>", "file truncated inside the manifest"))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER..manifest_end])
            .map_err(|e| Error::load("<manifest>", e.to_string()))?;
        if manifest.format_version != 1 {
            return Err(Error::load(
                "<manifest>",
                format!("unsupported format version {}", manifest.format_version),
            ));
        }
        let data_start = align_up(manifest_end);
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for r in manifest.tensors {
            if r.dtype != "f32" {
                return Err(Error::load(&r.name, format!("unsupported dtype {}", r.dtype)));
            }
            if r.offset % ALIGN != 0 {
                return Err(Error::load(&r.name, "misaligned offset"));
            }
            let count: usize = r.shape.iter().product();
            let start = data_start + r.offset;
            let end = start + 4 * count;
            if end > bytes.len() {
                return Err(Error::load(&r.name, "file truncated inside tensor data"));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            tensors.push(TensorEntry {
                name: r.name,
                shape: r.shape,
                data,
            });
        }
        Ok(Container {
            kind: manifest.kind,
            meta: manifest.meta,
            tensors,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
