//! `TQVC` checkpoints: a JSON header followed by the named parameter table
//! with Adam moments.
//!
//! ```text
//! b"TQVC" | u32 version = 1 | u32 header_len | header JSON
//! u32 n_params | n_params × (u32 name_len | name | u32 rows | u32 cols
//!                            | value f32… | adam.m f32… | adam.v f32… | u64 adam.step)
//! ```
//!
//! The checkpoint id is the first 16 hex digits of the SHA-256 of the
//! parameter table, so two files with the same weights and optimizer state
//! share an id regardless of their headers.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tqvsr_core::dme::DmeError;
use tqvsr_core::nn::{AdamState, ParamStore};
use tqvsr_core::trainer::{TrainConfig, TrainProgress};
use tqvsr_core::{DmeConfig, DmeModel, Matrix};

pub const MAGIC: &[u8; 4] = b"TQVC";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("not a TQVC checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint ends early while reading {0}")]
    Truncated(&'static str),
    #[error("{0} trailing bytes after the parameter table")]
    Trailing(usize),
    #[error("bad header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("parameter name is not UTF-8")]
    Name,
    #[error("header id {header} does not match parameter table id {table}")]
    IdMismatch { header: String, table: String },
    #[error(transparent)]
    Model(#[from] DmeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub checkpoint_id: String,
    pub model: DmeConfig,
    pub progress: TrainProgress,
    pub train: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: DmeModel<f32>,
}

fn put_f32s(out: &mut Vec<u8>, m: &Matrix<f32>) {
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

fn param_table(store: &ParamStore<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(p.value.cols() as u32).to_le_bytes());
        put_f32s(&mut out, &p.value);
        put_f32s(&mut out, &p.adam.m);
        put_f32s(&mut out, &p.adam.v);
        out.extend_from_slice(&p.adam.step.to_le_bytes());
    }
    out
}

fn table_id(table: &[u8]) -> String {
    hex::encode(&Sha256::digest(table)[..8])
}

pub fn checkpoint_id(model: &DmeModel<f32>) -> String {
    table_id(&param_table(model.store()))
}

pub fn encode(model: &DmeModel<f32>, progress: TrainProgress, train: Option<&TrainConfig>) -> (Vec<u8>, String) {
    let table = param_table(model.store());
    let id = table_id(&table);
    let header = CheckpointHeader { checkpoint_id: id.clone(), model: *model.config(), progress, train: train.copied() };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + table.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&table);
    (out, id)
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn matrix(&mut self, rows: usize, cols: usize, what: &'static str) -> Result<Matrix<f32>, CheckpointError> {
        let n = rows.checked_mul(cols).and_then(|n| n.checked_mul(4)).ok_or(CheckpointError::Truncated(what))?;
        let data = self.take(n, what)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Ok(Matrix::from_vec(rows, cols, data))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes };
    if r.take(4, "magic")? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let header_len = r.u32("header length")? as usize;
    let header: CheckpointHeader = serde_json::from_slice(r.take(header_len, "header")?)?;
    let table_bytes = r.bytes;
    let n = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?).map_err(|_| CheckpointError::Name)?.to_string();
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let value = r.matrix(rows, cols, "value")?;
        let m = r.matrix(rows, cols, "adam.m")?;
        let v = r.matrix(rows, cols, "adam.v")?;
        let step = r.u64("adam.step")?;
        let id = store.add(name, value);
        store.get_mut(id).adam = AdamState { m, v, step };
    }
    if !r.bytes.is_empty() {
        return Err(CheckpointError::Trailing(r.bytes.len()));
    }
    let table = table_id(table_bytes);
    if table != header.checkpoint_id {
        return Err(CheckpointError::IdMismatch { header: header.checkpoint_id, table });
    }
    let model = DmeModel::from_store(header.model, store)?;
    Ok(Checkpoint { header, model })
}

/// Writes the checkpoint and returns its id.
pub fn save(path: &Path, model: &DmeModel<f32>, progress: TrainProgress, train: Option<&TrainConfig>) -> Result<String, CheckpointError> {
    let (bytes, id) = encode(model, progress, train);
    fs::write(path, bytes).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    Ok(id)
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tqvsr_core::corpus::Dims;
    use tqvsr_core::{EncoderConfig, FusionMode};

    fn tiny(fusion: FusionMode) -> DmeModel<f32> {
        let cfg = DmeConfig {
            encoder: EncoderConfig { layers: 1, d: 8, heads: 2, ffn_mult: 2, dropout: 0.0, max_seq_len: 16 },
            dims: Dims { visual: 3, text: 2 },
            fusion,
        };
        DmeModel::new(cfg, 4).unwrap()
    }

    #[test]
    fn round_trip_keeps_values_moments_and_progress() {
        let mut model = tiny(FusionMode::Add);
        for (i, p) in model.store_mut().iter_mut().enumerate() {
            p.adam.step = i as u64;
            p.adam.m.as_mut_slice().iter_mut().for_each(|x| *x = 0.5 + i as f32);
        }
        let progress = TrainProgress { epoch: 3, step: 41 };
        let (bytes, id) = encode(&model, progress, Some(&TrainConfig::default()));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.header.progress, progress);
        assert_eq!(back.header.checkpoint_id, id);
        assert_eq!(back.model.fusion(), FusionMode::Add);
        assert_eq!(encode(&back.model, progress, Some(&TrainConfig::default())).0, bytes);
    }

    #[test]
    fn id_tracks_weights_only() {
        let model = tiny(FusionMode::Concat);
        let (a, id_a) = encode(&model, TrainProgress::default(), None);
        let (b, id_b) = encode(&model, TrainProgress { epoch: 1, step: 1 }, None);
        assert_ne!(a, b);
        assert_eq!(id_a, id_b);
        let mut other = model.clone();
        other.store_mut().iter_mut().next().unwrap().value.as_mut_slice()[0] += 1.0;
        assert_ne!(checkpoint_id(&other), id_a);
    }

    #[test]
    fn rejects_tampering() {
        let (mut bytes, _) = encode(&tiny(FusionMode::Concat), TrainProgress::default(), None);
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Truncated(_))));
        let last = bytes.len() - 20;
        bytes[last] ^= 1;
        assert!(matches!(decode(&bytes), Err(CheckpointError::IdMismatch { .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CheckpointError::BadMagic)));
    }
}
