//! Named-tensor archive and its sidecar role manifest.
//!
//! Layout: 8-byte little-endian header length `N`, `N` bytes of UTF-8 JSON
//! mapping tensor name to `{dtype, shape, data_offsets}`, then the raw
//! little-endian tensor data. Offsets are relative to the start of the data
//! section. An optional `__metadata__` entry holds string key/value pairs.

use std::collections::BTreeMap;
use std::path::Path;

use half::f16;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{Fnv1a, Matrix, Scalar};

const METADATA_KEY: &str = "__metadata__";
/// Refuse headers larger than this to avoid absurd allocations on corrupt input.
const MAX_HEADER: u64 = 100 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

/// One stored tensor. Values are held as `f32` regardless of storage dtype.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dtype: Dtype, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Archive(format!(
                "shape {shape:?} holds {n} values but {} were given",
                data.len()
            )));
        }
        let data = match dtype {
            Dtype::F32 => data,
            // round through storage precision so in-memory values match a reload
            Dtype::F16 => data.into_iter().map(|v| f16::from_f32(v).to_f32()).collect(),
        };
        Ok(Self { dtype, shape, data })
    }

    pub fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        Self {
            dtype: Dtype::F32,
            shape: vec![m.rows(), m.cols()],
            data: m.data().iter().map(|v| v.f64() as f32).collect(),
        }
    }

    /// Raw little-endian bytes in storage dtype.
    pub fn bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * self.dtype.size());
        match self.dtype {
            Dtype::F32 => self.data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F16 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        }
        out
    }

    /// FNV-1a 64 over the raw storage bytes.
    pub fn checksum(&self) -> u64 {
        Fnv1a::hash(&self.bytes())
    }

    /// View as a matrix: 1-D tensors become a single row, higher ranks fold
    /// all trailing dimensions into the columns.
    pub fn to_matrix<T: Scalar>(&self) -> Matrix<T> {
        let (rows, cols) = match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, rest @ ..] => (*r, rest.iter().product()),
        };
        Matrix::from_vec(rows, cols, self.data.iter().map(|&v| T::of(v as f64)).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn insert_matrix<T: Scalar>(&mut self, name: impl Into<String>, m: &Matrix<T>) {
        self.insert(name, Tensor::from_matrix(m));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Tensor `name` with exactly `shape`, or a manifest error naming it.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::manifest(name, "missing from archive"))?;
        if t.shape != shape {
            return Err(Error::manifest(
                name,
                format!("expected shape {shape:?}, found {:?}", t.shape),
            ));
        }
        Ok(t)
    }

    /// FNV-1a 64 over every tensor's bytes in name order.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv1a::default();
        for t in self.tensors.values() {
            h.update(&t.bytes());
        }
        h.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0;
        let mut blobs = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.bytes();
            let entry = HeaderEntry {
                dtype: t.dtype,
                shape: t.shape.clone(),
                data_offsets: [offset, offset + bytes.len()],
            };
            offset += bytes.len();
            header.insert(name.clone(), serde_json::to_value(entry).expect("serialisable"));
            blobs.push(bytes);
        }
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.to_string(),
                serde_json::to_value(&self.metadata).expect("serialisable"),
            );
        }
        // serde_json::Map is ordered by key without the preserve_order feature
        let json = serde_json::to_vec(&Value::Object(header)).expect("serialisable");
        let mut out = Vec::with_capacity(8 + json.len() + offset);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in blobs {
            out.extend_from_slice(&b);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Archive(msg);
        if bytes.len() < 8 {
            return Err(bad(format!("{} bytes is too short for a header", bytes.len())));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        if n > MAX_HEADER || 8 + n as usize > bytes.len() {
            return Err(bad(format!("header length {n} exceeds file size {}", bytes.len())));
        }
        let header_end = 8 + n as usize;
        let header: BTreeMap<String, Value> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| bad(format!("header is not a JSON object: {e}")))?;
        let data = &bytes[header_end..];
        let mut archive = Self::new();
        let mut spans = Vec::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                archive.metadata = serde_json::from_value(value)
                    .map_err(|e| bad(format!("metadata must map strings to strings: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| bad(format!("tensor `{name}`: {e}")))?;
            let [begin, end] = entry.data_offsets;
            let count: usize = entry.shape.iter().product();
            if begin > end || end > data.len() {
                return Err(bad(format!("tensor `{name}`: offsets [{begin}, {end}) out of bounds")));
            }
            if end - begin != count * entry.dtype.size() {
                return Err(bad(format!(
                    "tensor `{name}`: {} bytes for shape {:?} of {:?}",
                    end - begin,
                    entry.shape,
                    entry.dtype
                )));
            }
            let raw = &data[begin..end];
            let values = match entry.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                Dtype::F16 => raw
                    .chunks_exact(2)
                    .map(|c| f16::from_le_bytes(c.try_into().expect("2 bytes")).to_f32())
                    .collect(),
            };
            spans.push((begin, end));
            archive.tensors.insert(
                name,
                Tensor {
                    dtype: entry.dtype,
                    shape: entry.shape,
                    data: values,
                },
            );
        }
        spans.sort_unstable();
        let mut cursor = 0;
        for (begin, end) in spans {
            if begin != cursor {
                return Err(bad(format!("data section has a gap or overlap at byte {cursor}")));
            }
            cursor = end;
        }
        if cursor != data.len() {
            return Err(bad(format!(
                "data section is {} bytes but tensors cover {cursor}",
                data.len()
            )));
        }
        Ok(archive)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn format_checksum(c: u64) -> String {
    format!("{c:016x}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTensor {
    pub shape: Vec<usize>,
    /// FNV-1a 64 of the raw bytes as 16 lowercase hex digits.
    pub checksum: String,
}

/// Sidecar JSON mapping backbone roles to archive tensor names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub source: String,
    pub roles: BTreeMap<String, String>,
    #[serde(default)]
    pub tensors: BTreeMap<String, ManifestTensor>,
    #[serde(default)]
    pub tool_version: String,
}

impl Manifest {
    /// Identity manifest (role = name) covering every tensor of `archive`.
    pub fn for_archive(source: impl Into<String>, archive: &TensorArchive) -> Self {
        let mut roles = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (name, t) in archive.tensors() {
            roles.insert(name.to_string(), name.to_string());
            tensors.insert(
                name.to_string(),
                ManifestTensor {
                    shape: t.shape.clone(),
                    checksum: format_checksum(t.checksum()),
                },
            );
        }
        Self {
            source: source.into(),
            roles,
            tensors,
            tool_version: concat!("qfae ", env!("CARGO_PKG_VERSION")).to_string(),
        }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Archive name for `role`; roles absent from the map resolve to themselves.
    pub fn resolve<'m>(&'m self, role: &'m str) -> &'m str {
        self.roles.get(role).map(String::as_str).unwrap_or(role)
    }

    /// Checks every listed tensor's presence, shape and checksum in `archive`.
    pub fn verify(&self, archive: &TensorArchive) -> Result<()> {
        for (role, name) in &self.roles {
            if archive.get(name).is_none() {
                return Err(Error::manifest(
                    name,
                    format!("role `{role}` maps to a tensor missing from the archive"),
                ));
            }
        }
        for (name, expected) in &self.tensors {
            let t = archive.expect(name, &expected.shape)?;
            let got = format_checksum(t.checksum());
            if got != expected.checksum {
                return Err(Error::manifest(
                    name,
                    format!("checksum {got} does not match manifest {}", expected.checksum),
                ));
            }
        }
        Ok(())
    }
}
