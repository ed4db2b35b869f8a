//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "HSEG" | version u32 = 1 | tensor count u32
//! per tensor: name length u16 | UTF-8 name | dtype u8 | ndim u8 |
//!             extents u32 * ndim | values
//! ```
//!
//! dtype 0 is 32-bit float, dtype 1 is 64-bit float. Tensors are written in
//! parameter-store order and include batch-norm running statistics; Adam
//! moments are not saved.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: [u8; 4] = *b"HSEG";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported checkpoint version {found} (expected {VERSION})")]
    UnsupportedVersion { found: u32 },

    #[error("checkpoint truncated at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: String },

    #[error("{} trailing bytes after the last tensor", .0)]
    TrailingBytes(usize),

    #[error("tensor name is not valid UTF-8 at byte {0}")]
    BadName(usize),

    #[error("unknown dtype tag {tag} for tensor `{name}`")]
    UnknownDtype { name: String, tag: u8 },

    #[error("tensor `{name}` has dtype {found}, expected {expected}")]
    DtypeMismatch { name: String, found: u8, expected: u8 },

    #[error("tensor `{name}` has invalid extents {shape:?}")]
    BadShape { name: String, shape: Vec<usize> },

    #[error("duplicate tensor `{0}`")]
    DuplicateTensor(String),

    #[error("tensor `{name}` has shape {found:?}, the model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("checkpoint lacks tensor `{0}`")]
    MissingTensor(String),

    #[error("checkpoint has tensor `{0}` that the model does not know")]
    UnexpectedTensor(String),

    #[error("cannot encode tensor `{name}`: {detail}")]
    Unencodable { name: String, detail: String },
}

/// Serializes every tensor in the store.
pub fn encode<T: Real>(store: &ParameterStore<T>) -> Result<Vec<u8>> {
    let count = u32::try_from(store.len()).map_err(|_| unencodable("*", "too many tensors"))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for (name, p) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| unencodable(name, "name longer than 65535 bytes"))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE);
        let shape = p.value.shape();
        let ndim = u8::try_from(shape.len()).map_err(|_| unencodable(name, "more than 255 dimensions"))?;
        out.push(ndim);
        for &d in shape {
            let d = u32::try_from(d).map_err(|_| unencodable(name, "extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

fn unencodable(name: &str, detail: &str) -> Error {
    CheckpointError::Unencodable {
        name: name.to_string(),
        detail: detail.to_string(),
    }
    .into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(CheckpointError::Truncated {
                offset: self.bytes.len(),
                what: what.to_string(),
            }),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint whose tensors all have element type `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<IndexMap<String, Tensor<T>>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| CheckpointError::BadMagic {
        found: bytes.to_vec(),
    })?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic.to_vec() });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version });
    }
    let count = r.u32("tensor count")?;
    let mut out = IndexMap::new();
    for i in 0..count {
        let len = r.u16(&format!("name length of tensor {i}"))? as usize;
        let start = r.pos;
        let name = std::str::from_utf8(r.take(len, &format!("name of tensor {i}"))?)
            .map_err(|_| CheckpointError::BadName(start))?
            .to_string();
        let tag = r.u8(&format!("dtype of `{name}`"))?;
        if tag > 1 {
            return Err(CheckpointError::UnknownDtype { name, tag });
        }
        if tag != T::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name,
                found: tag,
                expected: T::DTYPE,
            });
        }
        let ndim = r.u8(&format!("rank of `{name}`"))? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32(&format!("extents of `{name}`"))? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let numel = match numel {
            Some(n) if ndim > 0 && n > 0 => n,
            _ => return Err(CheckpointError::BadShape { name, shape }),
        };
        let nbytes = numel.checked_mul(T::BYTES).ok_or_else(|| CheckpointError::BadShape {
            name: name.clone(),
            shape: shape.clone(),
        })?;
        let raw = r.take(nbytes, &format!("values of `{name}`"))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let tensor = Tensor::new(shape, data).expect("validated extents");
        if out.insert(name.clone(), tensor).is_some() {
            return Err(CheckpointError::DuplicateTensor(name));
        }
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(path: &Path, store: &ParameterStore<T>) -> Result<()> {
    let bytes = encode(store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<IndexMap<String, Tensor<T>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode(&bytes)?)
}

/// Copies checkpoint tensors into a store built for the active spec.
///
/// Names and shapes must match exactly. Nothing is modified unless the whole
/// checkpoint validates.
pub fn restore<T: Real>(
    store: &mut ParameterStore<T>,
    mut tensors: IndexMap<String, Tensor<T>>,
) -> Result<(), CheckpointError> {
    for (name, p) in store.iter() {
        let Some(t) = tensors.get(name) else {
            return Err(CheckpointError::MissingTensor(name.to_string()));
        };
        if t.shape() != p.value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: t.shape().to_vec(),
            });
        }
    }
    if let Some(extra) = tensors.keys().find(|k| store.entry(k).is_none()) {
        return Err(CheckpointError::UnexpectedTensor(extra.clone()));
    }
    for (name, p) in store.iter_mut() {
        p.value = tensors.swap_remove(name).expect("validated");
        p.m = None;
        p.v = None;
    }
    Ok(())
}

/// Reads `path` and restores it into `store`.
pub fn load_into<T: Real>(path: &Path, store: &mut ParameterStore<T>) -> Result<()> {
    let tensors = load_checkpoint(path)?;
    Ok(restore(store, tensors)?)
}
