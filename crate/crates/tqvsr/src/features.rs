//! `TQVF` feature files: a fixed header followed by row-major little-endian
//! `f32` rows.
//!
//! ```text
//! b"TQVF" | u32 version = 1 | u32 dim | u64 rows | rows × dim × f32
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use tqvsr_core::Matrix;

pub const MAGIC: &[u8; 4] = b"TQVF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum FeatureFileError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a TQVF file")]
    BadMagic { path: PathBuf },
    #[error("{path}: unsupported TQVF version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: expected {expected} bytes of rows, found {found}")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: dim is {found}, expected {expected}")]
    Dim { path: PathBuf, expected: usize, found: usize },
}

pub fn encode(m: &Matrix<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    for x in m.as_slice() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Matrix<f32>, FeatureFileError> {
    let path = || path.to_path_buf();
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(FeatureFileError::BadMagic { path: path() });
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(FeatureFileError::Version { path: path(), version });
    }
    let dim = u32_at(8) as usize;
    let rows = u64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let body = &bytes[HEADER_LEN..];
    let expected = rows.saturating_mul(dim as u64).saturating_mul(4);
    if body.len() as u64 != expected {
        return Err(FeatureFileError::Truncated { path: path(), expected, found: body.len() as u64 });
    }
    let data = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(Matrix::from_vec(rows as usize, dim, data))
}

pub fn write(path: &Path, m: &Matrix<f32>) -> Result<(), FeatureFileError> {
    let io = |source| FeatureFileError::Io { path: path.to_path_buf(), source };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&encode(m)).map_err(io)
}

pub fn read(path: &Path) -> Result<Matrix<f32>, FeatureFileError> {
    let bytes = fs::read(path).map_err(|source| FeatureFileError::Io { path: path.to_path_buf(), source })?;
    decode(&bytes, path)
}

/// Reads a file and checks that its rows have `dim` columns.
pub fn read_dim(path: &Path, dim: usize) -> Result<Matrix<f32>, FeatureFileError> {
    let m = read(path)?;
    if m.cols() != dim {
        return Err(FeatureFileError::Dim { path: path.to_path_buf(), expected: dim, found: m.cols() });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let m = Matrix::from_vec(2, 3, vec![1.0, -0.0, f32::MIN_POSITIVE, 3.5, f32::MAX, -2.25]);
        let b = encode(&m);
        assert_eq!(&b[..4], b"TQVF");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 3);
        assert_eq!(u64::from_le_bytes(b[12..20].try_into().unwrap()), 2);
        assert_eq!(b.len(), 20 + 24);
        assert_eq!(f32::from_le_bytes(b[20..24].try_into().unwrap()), 1.0);
    }

    #[test]
    fn rejects_damaged_files() {
        let p = Path::new("x.tqvf");
        let mut b = encode(&Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        assert!(matches!(decode(&b[..b.len() - 1], p), Err(FeatureFileError::Truncated { .. })));
        b[0] = b'X';
        assert!(matches!(decode(&b, p), Err(FeatureFileError::BadMagic { .. })));
        let mut b = encode(&Matrix::from_vec(1, 2, vec![1.0, 2.0]));
        b[4] = 2;
        assert!(matches!(decode(&b, p), Err(FeatureFileError::Version { version: 2, .. })));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(rows in 0usize..6, cols in 0usize..6, bits in proptest::collection::vec(any::<u32>(), 36)) {
            let data: Vec<f32> = bits[..rows * cols].iter().map(|&b| f32::from_bits(b)).collect();
            let m = Matrix::from_vec(rows, cols, data.clone());
            let back = decode(&encode(&m), Path::new("p")).unwrap();
            prop_assert_eq!(back.shape(), (rows, cols));
            let got: Vec<u32> = back.as_slice().iter().map(|x| x.to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(got, want);
        }
    }
}
