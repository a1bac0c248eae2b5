//! Self-describing binary container for named tensors.
//!
//! Layout: `b"DSCK"`, format version (`u32` LE), manifest length (`u64` LE),
//! a JSON manifest, then the raw little-endian tensor payloads in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"DSCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum StoredTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl StoredTensor {
    fn dtype(&self) -> &'static str {
        match self {
            StoredTensor::F32(_) => f32::DTYPE,
            StoredTensor::F64(_) => f64::DTYPE,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoredTensor::F32(t) => t.shape(),
            StoredTensor::F64(t) => t.shape(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            StoredTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            StoredTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }

    /// Convert into the requested element type; fails on dtype mismatch.
    pub fn into_tensor<T: Scalar>(self) -> Result<Tensor<T>> {
        let found = self.dtype();
        if found != T::DTYPE {
            return Err(Error::Format(format!(
                "expected {} tensor, found {found}",
                T::DTYPE
            )));
        }
        Ok(match self {
            StoredTensor::F32(t) => t.cast(),
            StoredTensor::F64(t) => t.cast(),
        })
    }
}

pub trait IntoStored {
    fn into_stored(self) -> StoredTensor;
}

impl IntoStored for Tensor<f32> {
    fn into_stored(self) -> StoredTensor {
        StoredTensor::F32(self)
    }
}

impl IntoStored for Tensor<f64> {
    fn into_stored(self) -> StoredTensor {
        StoredTensor::F64(self)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    nbytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    kind: String,
    metadata: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: String,
    pub metadata: Value,
    pub tensors: Vec<(String, StoredTensor)>,
}

impl Container {
    pub fn new(kind: impl Into<String>, metadata: Value) -> Self {
        Self {
            kind: kind.into(),
            metadata,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: impl IntoStored) {
        self.tensors.push((name.into(), tensor.into_stored()));
    }

    pub fn take(&mut self, name: &str) -> Result<StoredTensor> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("container lacks tensor {name}")))?;
        Ok(self.tensors.remove(pos).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let offset = payload.len() as u64;
            t.write(&mut payload);
            entries.push(TensorEntry {
                name: name.clone(),
                dtype: t.dtype().to_string(),
                shape: t.shape().to_vec(),
                offset,
                nbytes: payload.len() as u64 - offset,
            });
        }
        let manifest = serde_json::to_vec(&Manifest {
            format_version: FORMAT_VERSION,
            kind: self.kind.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing container magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + mlen)
            .ok_or_else(|| Error::Format("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        let payload = &bytes[16 + mlen..];
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + e.nbytes as usize)
                .ok_or_else(|| Error::Format(format!("truncated payload for {}", e.name)))?;
            let stored = match e.dtype.as_str() {
                "f32" => StoredTensor::F32(decode::<f32>(raw, e.shape)?),
                "f64" => StoredTensor::F64(decode::<f64>(raw, e.shape)?),
                other => return Err(Error::Format(format!("unknown dtype {other}"))),
            };
            tensors.push((e.name, stored));
        }
        Ok(Self {
            kind: manifest.kind,
            metadata: manifest.metadata,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn decode<T: Scalar>(raw: &[u8], shape: Vec<usize>) -> Result<Tensor<T>> {
    let w = T::byte_width();
    if raw.len() % w != 0 {
        return Err(Error::Format("payload not aligned to element width".into()));
    }
    let data = raw.chunks_exact(w).map(T::read_le).collect();
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}
