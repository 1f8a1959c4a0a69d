//! Single-file tensor archive used for encoder weights and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CCPLARCH"
//! offset 8   u32       format version (1)
//! offset 12  u64       manifest length L
//! offset 20  L bytes   JSON manifest
//! offset 20+L          payload: tensors back to back, row-major
//! ```
//!
//! The manifest is `{"metadata": {string: string}, "tensors": [{"name",
//! "dtype", "shape", "offset", "length"}]}` with `offset`/`length` in bytes
//! relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

const MAGIC: &[u8; 8] = b"CCPLARCH";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    dtype: DType,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    metadata: BTreeMap<String, String>,
    tensors: Vec<EntryMeta>,
}

#[derive(Debug, Clone)]
struct Entry {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub metadata: BTreeMap<String, String>,
    entries: BTreeMap<String, Entry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Float>(&mut self, name: impl Into<String>, tensor: &Tensor<T>) {
        self.entries.insert(
            name.into(),
            Entry { dtype: T::DTYPE, shape: tensor.shape().to_vec(), bytes: T::to_le_bytes_vec(tensor.data()) },
        );
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.entries.get(name).map(|e| e.shape.as_slice())
    }

    /// Reads a tensor, converting between element types if needed.
    pub fn get<T: Float>(&self, name: &str) -> Result<Tensor<T>> {
        let e = self.entries.get(name).ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))?;
        let data: Vec<T> = match e.dtype {
            DType::F32 => f32::from_le_bytes_slice(&e.bytes).into_iter().map(|v| T::from_f64_lossy(v as f64)).collect(),
            DType::F64 => f64::from_le_bytes_slice(&e.bytes).into_iter().map(T::from_f64_lossy).collect(),
        };
        Tensor::new(&e.shape, data).map_err(|err| Error::Archive(format!("tensor `{name}`: {err}")))
    }

    /// Reads a tensor and checks its shape.
    pub fn get_shaped<T: Float>(&self, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
        let t = self.get::<T>(name)?;
        if t.shape() != shape {
            return Err(Error::Archive(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut tensors = Vec::with_capacity(self.entries.len());
        for (name, e) in &self.entries {
            tensors.push(EntryMeta {
                name: name.clone(),
                dtype: e.dtype,
                shape: e.shape.clone(),
                offset: payload.len() as u64,
                length: e.bytes.len() as u64,
            });
            payload.extend_from_slice(&e.bytes);
        }
        let manifest = serde_json::to_vec(&Manifest { metadata: self.metadata.clone(), tensors })
            .expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Archive(format!("file too short ({} bytes) for an archive header", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::Archive("bad magic; not a tensor archive".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Archive(format!("unsupported archive version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let payload_start = HEADER_LEN
            .checked_add(mlen)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::Archive("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..payload_start])
            .map_err(|e| Error::Archive(format!("corrupt manifest: {e}")))?;
        let payload = &bytes[payload_start..];
        let mut entries = BTreeMap::new();
        for t in manifest.tensors {
            let (start, len) = (t.offset as usize, t.length as usize);
            let expected = t.shape.iter().product::<usize>() * t.dtype.size();
            if len != expected {
                return Err(Error::Archive(format!(
                    "tensor `{}`: {} bytes recorded, shape {:?} needs {}",
                    t.name, len, t.shape, expected
                )));
            }
            let end = start.checked_add(len).filter(|&e| e <= payload.len()).ok_or_else(|| {
                Error::Archive(format!("truncated payload: tensor `{}` extends past end of file", t.name))
            })?;
            entries.insert(t.name, Entry { dtype: t.dtype, shape: t.shape, bytes: payload[start..end].to_vec() });
        }
        Ok(Self { metadata: manifest.metadata, entries })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension("partial");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
            f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Archive(msg) => Error::Archive(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// SHA-256 of the serialized archive, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}
