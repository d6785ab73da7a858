//! `LTCM` files: LTC matrices on disk.
//!
//! Mirrors the trajectory format conventions (little-endian, CRC32 trailer):
//!
//! ```text
//! magic       4  b"LTCM"
//! version     u16 = 1
//! dtype       u8  = 0 (f32)
//! reserved    u8  = 0
//! n_query     u64
//! n_train     u64
//! query_ids   n_query x u64
//! train_ids   n_train x u64
//! values      n_query x n_train f32, row-major
//! mask        ceil(n_query * n_train / 8) bytes, bit i set = entry i degenerate (LSB first)
//! crc32       u32 over every preceding byte
//! ```

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::ltc::LtcMatrix;

pub const MAGIC: [u8; 4] = *b"LTCM";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 1 + 8 + 8;

#[derive(Debug, Error)]
pub enum LtcmError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, expected \"LTCM\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("file is {actual} bytes, header implies {expected}")]
    Length { expected: u64, actual: u64 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("non-finite value at entry {0}")]
    NonFinite(usize),
}

pub fn encode(matrix: &LtcMatrix) -> Vec<u8> {
    let cells = matrix.values().len();
    let mut out = Vec::with_capacity(
        HEADER_LEN + 8 * (matrix.n_query() + matrix.n_train()) + 4 * cells + cells.div_ceil(8) + 4,
    );
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&[0, 0]);
    out.extend_from_slice(&(matrix.n_query() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.n_train() as u64).to_le_bytes());
    for id in matrix.query_ids().iter().chain(matrix.train_ids()) {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in matrix.values() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut mask = vec![0u8; cells.div_ceil(8)];
    for (i, _) in matrix.degenerate_mask().iter().enumerate().filter(|(_, d)| **d) {
        mask[i / 8] |= 1 << (i % 8);
    }
    out.extend_from_slice(&mask);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn write_matrix<W: Write>(matrix: &LtcMatrix, mut sink: W) -> Result<usize, LtcmError> {
    let bytes = encode(matrix);
    sink.write_all(&bytes)?;
    sink.flush()?;
    Ok(bytes.len())
}

pub fn write_file(matrix: &LtcMatrix, path: impl AsRef<Path>) -> Result<usize, LtcmError> {
    write_matrix(matrix, BufWriter::new(File::create(path)?))
}

/// Reads a matrix. Values come back rounded to `f32`.
pub fn read_matrix<R: Read>(mut source: R) -> Result<LtcMatrix, LtcmError> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    let short = |expected: usize| LtcmError::Length {
        expected: expected as u64,
        actual: bytes.len() as u64,
    };
    if bytes.len() < HEADER_LEN + 4 {
        return Err(short(HEADER_LEN + 4));
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(LtcmError::BadMagic(magic));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(LtcmError::UnsupportedVersion(version));
    }
    if bytes[6] != 0 {
        return Err(LtcmError::UnsupportedDtype(bytes[6]));
    }
    let n_query = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n_train = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let dims = usize::try_from(n_query).ok().zip(usize::try_from(n_train).ok());
    let layout = dims.and_then(|(q, n)| {
        let cells = q.checked_mul(n)?;
        let total = HEADER_LEN
            .checked_add(q.checked_add(n)?.checked_mul(8)?)?
            .checked_add(cells.checked_mul(4)?)?
            .checked_add(cells.div_ceil(8))?
            .checked_add(4)?;
        Some((q, n, cells, total))
    });
    let Some((q, n, cells, total)) = layout else {
        return Err(short(usize::MAX));
    };
    if bytes.len() != total {
        return Err(short(total));
    }
    let body = total - 4;
    let stored = u32::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc32fast::hash(&bytes[..body]);
    if stored != computed {
        return Err(LtcmError::ChecksumMismatch { stored, computed });
    }

    let mut at = HEADER_LEN;
    let mut read_ids = |count: usize| {
        let ids: Vec<u64> = bytes[at..at + 8 * count]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        at += 8 * count;
        ids
    };
    let query_ids = read_ids(q);
    let train_ids = read_ids(n);
    let mut values = Vec::with_capacity(cells);
    for (i, c) in bytes[at..at + 4 * cells].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(c.try_into().unwrap());
        if !v.is_finite() {
            return Err(LtcmError::NonFinite(i));
        }
        values.push(v as f64);
    }
    at += 4 * cells;
    let mask = &bytes[at..at + cells.div_ceil(8)];
    let degenerate = (0..cells).map(|i| mask[i / 8] >> (i % 8) & 1 == 1).collect();
    Ok(LtcMatrix::from_parts(query_ids, train_ids, values, degenerate).expect("dimensions checked above"))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<LtcMatrix, LtcmError> {
    read_matrix(File::open(path)?)
}
