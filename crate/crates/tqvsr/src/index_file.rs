//! `TQVI` index files.
//!
//! ```text
//! b"TQVI" | u32 version = 1 | u32 d | u64 n | u32 id_len | checkpoint id | u8 mask bits
//! n × (u32 len | segment id | d × f32)
//! ```
//!
//! Mask bit `i` set means channel `i` of `question_text, question_image,
//! video_transcript, video_appearance` was zeroed.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use tqvsr_core::dme::DmeError;
use tqvsr_core::retrieval::{EmbeddingIndex, RetrievalError};
use tqvsr_core::MaskSpec;

pub const MAGIC: &[u8; 4] = b"TQVI";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum IndexFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a TQVI index")]
    BadMagic,
    #[error("unsupported index version {0}")]
    Version(u32),
    #[error("index ends early while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the last entry")]
    Trailing(usize),
    #[error("id is not UTF-8")]
    Utf8,
    #[error(transparent)]
    Mask(#[from] DmeError),
    #[error(transparent)]
    Index(#[from] RetrievalError),
}

pub fn encode(index: &EmbeddingIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&(index.checkpoint_id.len() as u32).to_le_bytes());
    out.extend_from_slice(index.checkpoint_id.as_bytes());
    out.push(index.mask.to_bits());
    for (id, v) in index.entries() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for x in v {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<EmbeddingIndex, IndexFileError> {
    let mut rest = bytes;
    let mut take = |n: usize, what: &'static str| -> Result<&[u8], IndexFileError> {
        if rest.len() < n {
            return Err(IndexFileError::Truncated(what));
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    if take(4, "magic")? != MAGIC {
        return Err(IndexFileError::BadMagic);
    }
    let u32_le = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
    let version = u32_le(take(4, "version")?);
    if version != VERSION {
        return Err(IndexFileError::Version(version));
    }
    let dim = u32_le(take(4, "dim")?) as usize;
    let n = u64::from_le_bytes(take(8, "count")?.try_into().unwrap());
    let id_len = u32_le(take(4, "checkpoint id length")?) as usize;
    let checkpoint_id = std::str::from_utf8(take(id_len, "checkpoint id")?).map_err(|_| IndexFileError::Utf8)?.to_string();
    let mask = MaskSpec::from_bits(take(1, "mask")?[0])?;
    let mut entries = Vec::new();
    for _ in 0..n {
        let len = u32_le(take(4, "id length")?) as usize;
        let id = std::str::from_utf8(take(len, "segment id")?).map_err(|_| IndexFileError::Utf8)?.to_string();
        let v = take(dim * 4, "vector")?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        entries.push((id, v));
    }
    if !rest.is_empty() {
        return Err(IndexFileError::Trailing(rest.len()));
    }
    Ok(EmbeddingIndex::new(dim, entries, checkpoint_id, mask)?)
}

pub fn save(path: &Path, index: &EmbeddingIndex) -> Result<(), IndexFileError> {
    fs::write(path, encode(index)).map_err(|source| IndexFileError::Io { path: path.to_path_buf(), source })
}

pub fn load(path: &Path) -> Result<EmbeddingIndex, IndexFileError> {
    let bytes = fs::read(path).map_err(|source| IndexFileError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}
