//! File formats: SEMB embedding stores, trial lists, score files and SMDL
//! model checkpoints.
//!
//! All binary integers are little-endian. Readers are total: every malformed
//! input maps to a [`DataError`] variant.

mod checkpoint;
mod scores;
mod semb;
mod trials;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, Tensor, FORMAT_VERSION_KEY, SMDL_MAGIC, SMDL_VERSION,
};
pub use scores::{
    format_score_line, format_scores, parse_scores, read_scores, write_scores, ScoreEntry, ScoreSet, ScoredTrial,
};
pub use semb::{read_embeddings, write_embeddings, EmbeddingStore, MAX_ID_BYTES, SEMB_MAGIC, SEMB_VERSION};
pub use trials::{format_trials, parse_trials, read_trials, write_trials, Label, TrialRecord};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("unsupported {format} version {version}")]
    UnsupportedVersion { format: &'static str, version: u32 },
    #[error("truncated file: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{count} trailing bytes after last record at offset {offset}")]
    TrailingBytes { offset: usize, count: usize },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("non-finite value in {id:?} at component {index}")]
    NonFinite { id: String, index: usize },
    #[error("invalid id at offset {offset}: {reason}")]
    InvalidId { offset: usize, reason: String },
    #[error("embedding dimension must be positive")]
    ZeroDim,
    #[error("vector for {id:?} has {found} components, store dim is {expected}")]
    DimMismatch {
        id: String,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: unknown label {token:?} (expected target, nontarget or spoof)")]
    UnknownLabel { line: usize, token: String },
    #[error("line {line}: expected 3 fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: empty id")]
    EmptyId { line: usize },
    #[error("invalid trial id {0:?}: ids must be non-empty, contain no whitespace and not start with '#'")]
    BadTrialId(String),
    #[error("line {line}: malformed score line: {reason}")]
    MalformedScore { line: usize, reason: String },
    #[error("non-finite score for trial ({enrol_id}, {test_id})")]
    NonFiniteScore { enrol_id: String, test_id: String },
    #[error("no score for trial ({enrol_id}, {test_id})")]
    MissingScore { enrol_id: String, test_id: String },
    #[error("score for ({enrol_id}, {test_id}) has no matching trial")]
    UnexpectedScore { enrol_id: String, test_id: String },
    #[error("duplicate trial ({enrol_id}, {test_id})")]
    DuplicateTrial { enrol_id: String, test_id: String },
    #[error("tensor {tensor:?}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {tensor:?}: shape {shape:?} holds {expected} values but data has {found}")]
    TensorLength {
        tensor: String,
        shape: Vec<usize>,
        expected: usize,
        found: usize,
    },
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),
    #[error("missing metadata key {0:?}")]
    MissingMetadata(String),
    #[error("metadata {key:?} has invalid value {value:?}")]
    BadMetadata { key: String, value: String },
    #[error("{what} does not fit the on-disk field ({len} > {max})")]
    FieldOverflow {
        what: String,
        len: usize,
        max: usize,
    },
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Bounds-checked little-endian reader over an in-memory file.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.remaining() < n {
            return Err(DataError::Truncated {
                offset: self.pos,
                needed: n,
                available: self.remaining(),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], DataError> {
        let mut out = [0u8; N];
        out.copy_from_slice(self.take(N)?);
        Ok(out)
    }

    pub(crate) fn u16(&mut self) -> Result<u16, DataError> {
        self.array().map(u16::from_le_bytes)
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        self.array().map(u32::from_le_bytes)
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DataError> {
        self.array().map(u64::from_le_bytes)
    }

    pub(crate) fn f32(&mut self) -> Result<f32, DataError> {
        self.array().map(f32::from_le_bytes)
    }

    pub(crate) fn utf8(&mut self, len: usize) -> Result<&'a str, DataError> {
        let offset = self.pos;
        let bytes = self.take(len)?;
        std::str::from_utf8(bytes).map_err(|e| DataError::InvalidId {
            offset,
            reason: e.to_string(),
        })
    }

    pub(crate) fn finish(&self) -> Result<(), DataError> {
        match self.remaining() {
            0 => Ok(()),
            count => Err(DataError::TrailingBytes {
                offset: self.pos,
                count,
            }),
        }
    }
}

pub(crate) fn checked_u16(what: &str, len: usize) -> Result<u16, DataError> {
    u16::try_from(len).map_err(|_| DataError::FieldOverflow {
        what: what.to_string(),
        len,
        max: u16::MAX as usize,
    })
}

pub(crate) fn checked_u32(what: &str, len: usize) -> Result<u32, DataError> {
    u32::try_from(len).map_err(|_| DataError::FieldOverflow {
        what: what.to_string(),
        len,
        max: u32::MAX as usize,
    })
}
