//! Named-tensor store and the INNW v1 checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "INNW" | version u32 = 1 | tensor_count u32
//! per tensor: name_len u16 | name (UTF-8) | dtype u8 (0 = f32, 1 = f64)
//!             | ndim u8 | dims ndim x u32 | payload (row-major IEEE-754)
//! CRC32 (IEEE) u32 over all preceding bytes
//! ```

use std::path::Path;

use indexmap::IndexMap;
use thiserror::Error;

use crate::tensor::{DType, DynTensor, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"INNW";
pub const VERSION: u32 = 1;
pub const MAX_NAME_BYTES: usize = u16::MAX as usize;

#[derive(Debug, Error)]
pub enum WeightsError {
    #[error("invalid tensor name {0:?}: names must be 1..=65535 UTF-8 bytes")]
    InvalidName(String),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error("tensor {0:?} contains non-finite values")]
    NonFinite(String),
    #[error("tensor {name:?} has {ndim} dims; the container supports at most 255 of at most u32::MAX each")]
    Unrepresentable { name: String, ndim: usize },
    #[error("bad magic {found:?} at offset 0 (expected \"INNW\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported container version {0} at offset 4")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch over bytes 0..{covered}: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch {
        covered: usize,
        stored: u32,
        computed: u32,
    },
    #[error("truncated file: needed {needed} bytes at offset {offset} while reading {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: String,
    },
    #[error("malformed record at offset {offset}: {detail}")]
    Malformed { offset: usize, detail: String },
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = WeightsError> = std::result::Result<T, E>;

/// Ordered map from slot name to tensor; insertion order is preserved on save.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, DynTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check(name: &str, t: &DynTensor) -> Result<()> {
        if name.is_empty() || name.len() > MAX_NAME_BYTES {
            return Err(WeightsError::InvalidName(name.to_string()));
        }
        if !t.all_finite() {
            return Err(WeightsError::NonFinite(name.to_string()));
        }
        if t.dims().len() > u8::MAX as usize || t.dims().iter().any(|&d| d > u32::MAX as usize) {
            return Err(WeightsError::Unrepresentable {
                name: name.to_string(),
                ndim: t.dims().len(),
            });
        }
        Ok(())
    }

    /// Adds a new tensor; fails if the name is taken.
    pub fn insert(&mut self, name: impl Into<String>, t: impl Into<DynTensor>) -> Result<()> {
        let name = name.into();
        let t = t.into();
        Self::check(&name, &t)?;
        if self.tensors.contains_key(&name) {
            return Err(WeightsError::DuplicateName(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Inserts or replaces, keeping the original position of an existing name.
    pub fn set(&mut self, name: impl Into<String>, t: impl Into<DynTensor>) -> Result<()> {
        let name = name.into();
        let t = t.into();
        Self::check(&name, &t)?;
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&DynTensor> {
        self.tensors.get(name)
    }

    /// Fetches `name` converted to `T` (borrowed when the dtype matches).
    pub fn get_as<T: Element>(&self, name: &str) -> Option<std::borrow::Cow<'_, Tensor<T>>> {
        self.tensors.get(name).map(|t| t.to_dtype::<T>())
    }

    pub fn remove(&mut self, name: &str) -> Option<DynTensor> {
        self.tensors.shift_remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DynTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(DynTensor::len).sum()
    }

    /// Converts every tensor to `T`.
    pub fn to_dtype<T: Element>(&self) -> WeightStore {
        WeightStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), T::wrap(v.to_dtype::<T>().into_owned())))
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.scalar_count() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.push(t.dims().len() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t {
                DynTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
                DynTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(&mut out)),
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses a container; the checksum is verified before any record is decoded.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(WeightsError::BadMagic {
                found: [magic[0], magic[1], magic[2], magic[3]],
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(WeightsError::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        if bytes.len() < 16 {
            return Err(WeightsError::Truncated {
                offset: bytes.len(),
                needed: 16 - bytes.len(),
                what: "checksum".into(),
            });
        }
        let covered = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[covered..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(&bytes[..covered]);
        if stored != computed {
            return Err(WeightsError::CrcMismatch {
                covered,
                stored,
                computed,
            });
        }
        let mut r = Reader {
            bytes: &bytes[..covered],
            pos: 12,
        };
        let mut store = WeightStore::new();
        for i in 0..count {
            let start = r.pos;
            let name_len = r.u16(&format!("name length of record {i}"))? as usize;
            let name = std::str::from_utf8(r.take(name_len, &format!("name of record {i}"))?)
                .map_err(|e| WeightsError::Malformed {
                    offset: start + 2,
                    detail: format!("name is not UTF-8: {e}"),
                })?
                .to_string();
            let dtype_pos = r.pos;
            let dtype = match r.take(1, "dtype")?[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => {
                    return Err(WeightsError::Malformed {
                        offset: dtype_pos,
                        detail: format!("unknown dtype code {other} for {name:?}"),
                    })
                }
            };
            let ndim = r.take(1, "ndim")?[0] as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32(&format!("dims of {name:?}"))? as usize);
            }
            let numel = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let payload_pos = r.pos;
            let numel = numel.filter(|_| !dims.is_empty() && !dims.contains(&0)).ok_or_else(|| {
                WeightsError::Malformed {
                    offset: payload_pos,
                    detail: format!("invalid dims {dims:?} for {name:?}"),
                }
            })?;
            let what = format!("payload of {name:?}");
            let t: DynTensor = match dtype {
                DType::F32 => read_payload::<f32>(&mut r, dims, numel, &what)?.into(),
                DType::F64 => read_payload::<f64>(&mut r, dims, numel, &what)?.into(),
            };
            store.insert(name, t).map_err(|e| WeightsError::Malformed {
                offset: start,
                detail: e.to_string(),
            })?;
        }
        if r.pos != covered {
            return Err(WeightsError::Malformed {
                offset: r.pos,
                detail: format!("{} trailing bytes before checksum", covered - r.pos),
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|source| WeightsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| WeightsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

fn read_payload<T: Element>(
    r: &mut Reader<'_>,
    dims: Vec<usize>,
    numel: usize,
    what: &str,
) -> Result<Tensor<T>> {
    let offset = r.pos;
    let len = numel.checked_mul(T::BYTES).ok_or(WeightsError::Malformed {
        offset,
        detail: format!("{what} size overflows"),
    })?;
    let raw = r.take(len, what)?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(dims, data).map_err(|e| WeightsError::Malformed {
        offset,
        detail: e.to_string(),
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(WeightsError::Truncated {
                offset: self.pos,
                needed: n,
                what: what.to_string(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_store_is_sixteen_bytes() {
        let bytes = WeightStore::new().to_bytes();
        assert_eq!(bytes.len(), 16);
        assert_eq!(&bytes[..4], b"INNW");
        assert_eq!(WeightStore::from_bytes(&bytes).unwrap(), WeightStore::new());
    }

    #[test]
    fn rejects_bad_names_and_duplicates() {
        let mut s = WeightStore::new();
        let t = Tensor::<f32>::zeros(&[1]).unwrap();
        assert!(matches!(s.insert("", t.clone()), Err(WeightsError::InvalidName(_))));
        assert!(s.insert("x".repeat(MAX_NAME_BYTES + 1), t.clone()).is_err());
        s.insert("a", t.clone()).unwrap();
        assert!(matches!(s.insert("a", t.clone()), Err(WeightsError::DuplicateName(_))));
        let nan = Tensor::<f32>::full(&[2], f32::NAN).unwrap();
        assert!(matches!(s.insert("b", nan), Err(WeightsError::NonFinite(_))));
    }

    #[test]
    fn version_and_magic_errors() {
        let mut bytes = WeightStore::new().to_bytes();
        bytes[4] = 2;
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(WeightsError::UnsupportedVersion(2))));
        bytes[0] = b'X';
        assert!(matches!(WeightStore::from_bytes(&bytes), Err(WeightsError::BadMagic { .. })));
    }

    #[test]
    fn set_keeps_position() {
        let mut s = WeightStore::new();
        s.insert("a", Tensor::<f32>::zeros(&[1]).unwrap()).unwrap();
        s.insert("b", Tensor::<f32>::zeros(&[1]).unwrap()).unwrap();
        s.set("a", Tensor::<f64>::zeros(&[2]).unwrap()).unwrap();
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(s.get("a").unwrap().dims(), &[2]);
    }
}
