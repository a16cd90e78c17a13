//! SMDL v1 model checkpoints: string metadata plus named row-major f32 tensors.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;

use super::{checked_u16, checked_u32, io_err, ByteReader, DataError};

pub const SMDL_MAGIC: &[u8; 4] = b"SMDL";
pub const SMDL_VERSION: u32 = 1;

/// Metadata key carrying the checkpoint format version.
pub const FORMAT_VERSION_KEY: &str = "format_version";

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(name: &str, shape: Vec<usize>, data: Vec<f32>) -> Result<Self, DataError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(DataError::ShapeMismatch {
                tensor: name.to_string(),
                expected: vec![],
                found: shape,
            });
        }
        let expected = shape.iter().product::<usize>();
        if expected != data.len() {
            return Err(DataError::TensorLength {
                tensor: name.to_string(),
                shape,
                expected,
                found: data.len(),
            });
        }
        Ok(Self { shape, data })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    tensors: IndexMap<String, Tensor>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self::new()
    }
}

impl Checkpoint {
    pub fn new() -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert(FORMAT_VERSION_KEY.to_string(), SMDL_VERSION.to_string());
        Self {
            metadata,
            tensors: IndexMap::new(),
        }
    }

    pub fn add_tensor(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<(), DataError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(DataError::DuplicateTensor(name));
        }
        self.tensors.insert(name, tensor);
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, DataError> {
        self.tensors
            .get(name)
            .ok_or_else(|| DataError::MissingTensor(name.to_string()))
    }

    pub fn tensors(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove_tensor(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.shift_remove(name)
    }

    pub fn meta(&self, key: &str) -> Result<&str, DataError> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| DataError::MissingMetadata(key.to_string()))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize, DataError> {
        let raw = self.meta(key)?;
        raw.parse().map_err(|_| DataError::BadMetadata {
            key: key.to_string(),
            value: raw.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DataError> {
        let mut out = Vec::new();
        out.extend_from_slice(SMDL_MAGIC);
        out.extend_from_slice(&SMDL_VERSION.to_le_bytes());
        out.extend_from_slice(&checked_u32("metadata count", self.metadata.len())?.to_le_bytes());
        for (k, v) in &self.metadata {
            out.extend_from_slice(&checked_u16("metadata key", k.len())?.to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&checked_u32("metadata value", v.len())?.to_le_bytes());
            out.extend_from_slice(v.as_bytes());
        }
        out.extend_from_slice(&checked_u32("tensor count", self.tensors.len())?.to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&checked_u16("tensor name", name.len())?.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&checked_u32("tensor rank", t.shape.len())?.to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&checked_u32("tensor extent", d)?.to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DataError> {
        let mut r = ByteReader::new(bytes);
        let magic: [u8; 4] = r.array()?;
        if &magic != SMDL_MAGIC {
            return Err(DataError::BadMagic {
                expected: "SMDL",
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != SMDL_VERSION {
            return Err(DataError::UnsupportedVersion {
                format: "SMDL",
                version,
            });
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let klen = r.u16()? as usize;
            let key = r.utf8(klen)?.to_string();
            let vlen = r.u32()? as usize;
            let value = r.utf8(vlen)?.to_string();
            if metadata.insert(key.clone(), value.clone()).is_some() {
                return Err(DataError::BadMetadata { key, value });
            }
        }
        if let Some(v) = metadata.get(FORMAT_VERSION_KEY) {
            if v.parse::<u32>().ok() != Some(SMDL_VERSION) {
                return Err(DataError::BadMetadata {
                    key: FORMAT_VERSION_KEY.into(),
                    value: v.clone(),
                });
            }
        }
        let mut ckpt = Checkpoint {
            metadata,
            tensors: IndexMap::new(),
        };
        for _ in 0..r.u32()? {
            let nlen = r.u16()? as usize;
            let name = r.utf8(nlen)?.to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(r.remaining() / 4));
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let len = match len {
                Some(n) if n.checked_mul(4).is_some_and(|b| b <= r.remaining()) => n,
                _ => {
                    return Err(DataError::Truncated {
                        offset: r.offset(),
                        needed: len.map_or(usize::MAX, |n| n.saturating_mul(4)),
                        available: r.remaining(),
                    })
                }
            };
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f32()?);
            }
            let tensor = Tensor::new(&name, shape, data)?;
            ckpt.add_tensor(name, tensor)?;
        }
        r.finish()?;
        Ok(ckpt)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()?).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(io_err(path))?;
    Checkpoint::from_bytes(&bytes)
}
