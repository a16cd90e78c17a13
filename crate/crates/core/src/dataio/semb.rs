//! SEMB v1 embedding stores.
//!
//! Layout: `"SEMB"`, u32 version, u32 dim, u64 count, then `count` records of
//! (u16 id length, UTF-8 id, `dim` × f32).

use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{io_err, ByteReader, DataError};

pub const SEMB_MAGIC: &[u8; 4] = b"SEMB";
pub const SEMB_VERSION: u32 = 1;
pub const MAX_ID_BYTES: usize = u16::MAX as usize;

const HEADER_BYTES: usize = 4 + 4 + 4 + 8;

/// Utterance id → fixed-dimension embedding, in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    entries: IndexMap<String, Vec<f32>>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self, DataError> {
        if dim == 0 {
            return Err(DataError::ZeroDim);
        }
        if u32::try_from(dim).is_err() {
            return Err(DataError::FieldOverflow {
                what: "embedding dim".into(),
                len: dim,
                max: u32::MAX as usize,
            });
        }
        Ok(Self {
            dim,
            entries: IndexMap::new(),
        })
    }

    /// Adds one vector, enforcing every store invariant.
    pub fn insert(&mut self, id: impl Into<String>, vector: Vec<f32>) -> Result<(), DataError> {
        let id = id.into();
        if id.is_empty() {
            return Err(DataError::InvalidId {
                offset: 0,
                reason: "empty id".into(),
            });
        }
        if id.len() > MAX_ID_BYTES {
            return Err(DataError::InvalidId {
                offset: 0,
                reason: format!("id is {} bytes, limit is {MAX_ID_BYTES}", id.len()),
            });
        }
        if vector.len() != self.dim {
            return Err(DataError::DimMismatch {
                id,
                expected: self.dim,
                found: vector.len(),
            });
        }
        if let Some(index) = vector.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite { id, index });
        }
        if self.entries.contains_key(&id) {
            return Err(DataError::DuplicateId(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.entries.get_index_of(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Vectors upcast to f64, in store order.
    pub fn to_f64_rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .values()
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let record = 2 + 4 * self.dim;
        let ids: usize = self.entries.keys().map(String::len).sum();
        let mut out = Vec::with_capacity(HEADER_BYTES + record * self.len() + ids);
        out.extend_from_slice(SEMB_MAGIC);
        out.extend_from_slice(&SEMB_VERSION.to_le_bytes());
        // Both fit: checked in `new` and `insert`.
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        for (id, values) in &self.entries {
            out.extend_from_slice(&(id.len() as u16).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if &magic != SEMB_MAGIC {
            return Err(DataError::BadMagic {
                expected: "SEMB",
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != SEMB_VERSION {
            return Err(DataError::UnsupportedVersion {
                format: "SEMB",
                version,
            });
        }
        let dim = r.u32()? as usize;
        let count = r.u64()?;
        let mut store = Self::new(dim)?;
        for _ in 0..count {
            let id_offset = r.offset();
            let len = r.u16()? as usize;
            if len == 0 {
                return Err(DataError::InvalidId {
                    offset: id_offset,
                    reason: "empty id".into(),
                });
            }
            let id = r.utf8(len)?.to_string();
            let mut values = Vec::with_capacity(dim.min(r.remaining() / 4));
            for _ in 0..dim {
                values.push(r.f32()?);
            }
            store.insert(id, values)?;
        }
        r.finish()?;
        Ok(store)
    }
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingStore, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    EmbeddingStore::from_bytes(&bytes)
}

pub fn write_embeddings(store: &EmbeddingStore, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()).map_err(io_err(path))
}
