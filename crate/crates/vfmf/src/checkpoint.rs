//! Shared binary tensor-table container used for checkpoints, datasets, and
//! probe heads.
//!
//! Layout (all integers little-endian):
//!   magic "VFMF" | version u32 | metadata (u32 byte length + UTF-8) |
//!   tensor count u32 | per tensor: name (u16 length + UTF-8), dtype u8
//!   (0 = IEEE-754 f32 LE), rank u8, extents u64 each, raw payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;
use vfmf_tensor::{ParamSet, Tensor};

pub const MAGIC: [u8; 4] = *b"VFMF";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes {found:?}, expected {MAGIC:?}")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {found}, supported up to {supported}")]
    BadVersion { found: u32, supported: u32 },
    #[error("truncated file: needed {needed} more bytes for {what}")]
    Truncated { needed: usize, what: &'static str },
    #[error("duplicate tensor name '{0}'")]
    DuplicateName(String),
    #[error("unsupported dtype code {0}")]
    BadDtype(u8),
    #[error("invalid UTF-8 in {0}")]
    BadUtf8(&'static str),
    #[error("missing tensor '{0}'")]
    MissingTensor(String),
    #[error("trailing bytes after last tensor")]
    TrailingBytes,
}

/// An ordered collection of named f32 tensors plus a metadata string
/// (the resolved config echo).
#[derive(Debug, Default, Clone)]
pub struct TensorTable {
    pub metadata: String,
    entries: Vec<(String, Tensor<f32>)>,
    index: BTreeMap<String, usize>,
}

impl TensorTable {
    pub fn new(metadata: String) -> Self {
        Self { metadata, entries: Vec::new(), index: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<f32>) -> Result<(), CheckpointError> {
        if self.index.contains_key(name) {
            return Err(CheckpointError::DuplicateName(name.to_string()));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>, CheckpointError> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adds every parameter value of `set`, prefixed with `prefix`.
    pub fn insert_params(&mut self, prefix: &str, set: &ParamSet<f32>) -> Result<(), CheckpointError> {
        for p in set.iter() {
            self.insert(&format!("{prefix}{}", p.name), p.value.clone())?;
        }
        Ok(())
    }

    /// Restores parameter values into `set` from entries under `prefix`.
    pub fn load_params(&self, prefix: &str, set: &mut ParamSet<f32>) -> Result<(), CheckpointError> {
        let names: Vec<String> = set.iter().map(|p| p.name.clone()).collect();
        for name in names {
            let t = self.get(&format!("{prefix}{name}"))?.clone();
            set.get_mut(&name).expect("known name").value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(&MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let meta = self.metadata.as_bytes();
        buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        buf.extend_from_slice(meta);
        buf.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, tensor) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(0u8); // dtype f32
            buf.push(tensor.shape().len() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take::<4>("magic")?;
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic { found: magic });
        }
        let version = u32::from_le_bytes(r.take::<4>("version")?);
        if version > VERSION {
            return Err(CheckpointError::BadVersion { found: version, supported: VERSION });
        }
        let meta_len = u32::from_le_bytes(r.take::<4>("metadata length")?) as usize;
        let meta = r.take_slice(meta_len, "metadata")?;
        let metadata =
            String::from_utf8(meta.to_vec()).map_err(|_| CheckpointError::BadUtf8("metadata"))?;
        let count = u32::from_le_bytes(r.take::<4>("tensor count")?) as usize;
        let mut table = TensorTable::new(metadata);
        for _ in 0..count {
            let name_len = u16::from_le_bytes(r.take::<2>("name length")?) as usize;
            let name = String::from_utf8(r.take_slice(name_len, "tensor name")?.to_vec())
                .map_err(|_| CheckpointError::BadUtf8("tensor name"))?;
            let dtype = r.take::<1>("dtype")?[0];
            if dtype != 0 {
                return Err(CheckpointError::BadDtype(dtype));
            }
            let rank = r.take::<1>("rank")?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(r.take::<8>("extent")?) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take_slice(numel * 4, "tensor payload")?;
            let data: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            table.insert(&name, Tensor::new(shape, data).expect("consistent shape"))?;
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes);
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io { path: path.display().to_string(), source };
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(io_err)?;
        }
        let mut file = fs::File::create(path).map_err(io_err)?;
        file.write_all(&self.to_bytes()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], CheckpointError> {
        let s = self.take_slice(N, what)?;
        Ok(s.try_into().unwrap())
    }

    fn take_slice(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Truncated {
                needed: self.pos + n - self.bytes.len(),
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorTable {
        let mut t = TensorTable::new("a = 1\n".into());
        t.insert("w", Tensor::new(vec![2, 2], vec![1.0, -2.5, 0.0, 3.25]).unwrap()).unwrap();
        t.insert("b", Tensor::new(vec![3], vec![0.5, 1.5, -0.125]).unwrap()).unwrap();
        t
    }

    #[test]
    fn round_trip_is_bitwise() {
        let t = sample();
        let bytes = t.to_bytes();
        let t2 = TensorTable::from_bytes(&bytes).unwrap();
        assert_eq!(t2.to_bytes(), bytes);
        assert_eq!(t2.get("w").unwrap().data(), t.get("w").unwrap().data());
        assert_eq!(t2.metadata, t.metadata);
    }

    #[test]
    fn flipped_magic_byte_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] ^= 0xff;
        assert!(matches!(
            TensorTable::from_bytes(&bytes),
            Err(CheckpointError::BadMagic { .. })
        ));
    }

    #[test]
    fn future_version_is_rejected_naming_both() {
        let mut bytes = sample().to_bytes();
        bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let err = TensorTable::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains(&format!("{}", VERSION + 1)) && err.contains(&format!("{VERSION}")));
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 5, 10, 3] {
            assert!(
                matches!(
                    TensorTable::from_bytes(&bytes[..cut]),
                    Err(CheckpointError::Truncated { .. })
                ),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut t = TensorTable::new(String::new());
        t.insert("x", Tensor::zeros(&[1])).unwrap();
        assert!(matches!(
            t.insert("x", Tensor::zeros(&[1])),
            Err(CheckpointError::DuplicateName(_))
        ));
    }
}
