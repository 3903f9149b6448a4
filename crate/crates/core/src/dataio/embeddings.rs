//! Embedding matrix files.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "GRVE"
//!      4     2  version (u16 LE) = 1
//!      6     1  dtype = 1 (f32)
//!      7     1  reserved = 0
//!      8     8  n rows (u64 LE)
//!     16     8  d cols (u64 LE)
//!     24 4·n·d  f32 LE payload, row-major
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GroveError, Result};
use crate::numerics::Matrix;

pub const EMBEDDING_MAGIC: [u8; 4] = *b"GRVE";
pub const EMBEDDING_VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;
pub const EMBEDDING_HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub version: u16,
    pub dtype: u8,
    pub n: u64,
    pub d: u64,
}

/// Encodes `m` (rounded to f32) in the on-disk layout.
pub fn encode_embeddings(m: &Matrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMBEDDING_HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(&EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(0);
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

/// Parses an embedding file image; `path` only labels errors.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<(Matrix, EmbeddingHeader)> {
    let path_s = || path.to_path_buf();
    if bytes.len() < EMBEDDING_HEADER_LEN {
        if bytes.len() >= 4 && bytes[..4] != EMBEDDING_MAGIC {
            return Err(GroveError::BadMagic {
                path: path_s(),
                found: bytes[..4].try_into().expect("4 bytes"),
            });
        }
        return Err(GroveError::TruncatedPayload {
            path: path_s(),
            expected: EMBEDDING_HEADER_LEN as u64,
            found: bytes.len() as u64,
        });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != EMBEDDING_MAGIC {
        return Err(GroveError::BadMagic {
            path: path_s(),
            found: magic,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMBEDDING_VERSION {
        return Err(GroveError::BadVersion {
            path: path_s(),
            found: version,
        });
    }
    let dtype = bytes[6];
    if dtype != DTYPE_F32 {
        return Err(GroveError::UnsupportedDtype {
            path: path_s(),
            found: dtype,
        });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let d = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes"));
    let expected = n
        .checked_mul(d)
        .and_then(|k| k.checked_mul(4))
        .and_then(|k| k.checked_add(EMBEDDING_HEADER_LEN as u64))
        .ok_or_else(|| GroveError::BadHeader {
            path: path_s(),
            reason: format!("shape {n}×{d} overflows"),
        })?;
    if bytes.len() as u64 != expected {
        return Err(GroveError::TruncatedPayload {
            path: path_s(),
            expected,
            found: bytes.len() as u64,
        });
    }
    let data = bytes[EMBEDDING_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let m = Matrix::from_vec(n as usize, d as usize, data)?;
    Ok((m, EmbeddingHeader { version, dtype, n, d }))
}

pub fn read_embeddings(path: &Path) -> Result<(Matrix, EmbeddingHeader)> {
    let bytes = fs::read(path).map_err(|e| GroveError::io(path, e))?;
    decode_embeddings(&bytes, path)
}

/// Writes `m` as f32. Values are rounded to the nearest f32.
pub fn write_embeddings(m: &Matrix, path: &Path) -> Result<()> {
    fs::write(path, encode_embeddings(m)).map_err(|e| GroveError::io(path, e))
}
