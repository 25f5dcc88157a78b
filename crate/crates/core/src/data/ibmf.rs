//! IBMF dense matrix files and the IBMG sparse graph cache.
//!
//! IBMF layout, little-endian throughout:
//!
//! ```text
//! 0..4    magic "IBMF"
//! 4..8    version u32 (1 = f32 payload, 2 = f64 payload)
//! 8..16   rows u64
//! 16..24  cols u64
//! 24..    rows*cols values, row-major
//! ```
//!
//! Feature files are always version 1. Checkpoints use version 2 so that
//! parameters survive a save/load cycle bit-for-bit.
//!
//! IBMG uses the same first 24 bytes (magic "IBMG", version 1), then an
//! entry count u64 and `(row u64, col u64, value f32)` triplets.

use std::fs;
use std::path::Path;

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

pub const MAGIC: &[u8; 4] = b"IBMF";
pub const GRAPH_MAGIC: &[u8; 4] = b"IBMG";
const HEADER: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32 = 1,
    F64 = 2,
}

fn header(magic: &[u8; 4], version: u32, rows: u64, cols: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER);
    out.extend_from_slice(magic);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&rows.to_le_bytes());
    out.extend_from_slice(&cols.to_le_bytes());
    out
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub fn encode_matrix(m: &Matrix, precision: Precision) -> Vec<u8> {
    let mut out = header(MAGIC, precision as u32, m.rows() as u64, m.cols() as u64);
    match precision {
        Precision::F32 => {
            out.reserve(m.data().len() * 4);
            for &v in m.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        Precision::F64 => {
            out.reserve(m.data().len() * 8);
            for &v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_matrix(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER {
        return Err(format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(format(format!(
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[0..4])
        )));
    }
    let version = read_u32(bytes, 4);
    let width = match version {
        1 => 4u64,
        2 => 8u64,
        v => return Err(format(format!("unsupported version {v}"))),
    };
    let rows = read_u64(bytes, 8);
    let cols = read_u64(bytes, 16);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| format(format!("{rows}x{cols} overflows")))?;
    let found = (bytes.len() - HEADER) as u64;
    if found != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let payload = &bytes[HEADER..];
    let data: Vec<f64> = if version == 1 {
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect()
    } else {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect()
    };
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{}: non-finite entry at row {}, col {}",
            path.display(),
            pos as u64 / cols.max(1),
            pos as u64 % cols.max(1)
        )));
    }
    Matrix::from_vec(rows as usize, cols as usize, data)
}

pub fn write_matrix(path: &Path, m: &Matrix, precision: Precision) -> Result<()> {
    fs::write(path, encode_matrix(m, precision)).map_err(|e| Error::io(path, e))
}

/// Reads an IBMF file; 32-bit payloads are widened to `f64`.
pub fn load_feature_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_matrix(&bytes, path)
}

pub fn write_graph(path: &Path, g: &SparseMatrix) -> Result<()> {
    let mut out = header(GRAPH_MAGIC, 1, g.rows() as u64, g.cols() as u64);
    out.extend_from_slice(&(g.nnz() as u64).to_le_bytes());
    for (r, c, v) in g.entries() {
        out.extend_from_slice(&(r as u64).to_le_bytes());
        out.extend_from_slice(&(c as u64).to_le_bytes());
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_graph(path: &Path) -> Result<SparseMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER + 8 || &bytes[0..4] != GRAPH_MAGIC {
        return Err(format("not an IBMG graph file".into()));
    }
    if read_u32(&bytes, 4) != 1 {
        return Err(format(format!(
            "unsupported version {}",
            read_u32(&bytes, 4)
        )));
    }
    let rows = read_u64(&bytes, 8) as usize;
    let cols = read_u64(&bytes, 16) as usize;
    let nnz = read_u64(&bytes, 24);
    let expected = nnz * 20;
    let found = (bytes.len() - HEADER - 8) as u64;
    if found != expected {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    let triplets = bytes[HEADER + 8..]
        .chunks_exact(20)
        .map(|c| {
            (
                read_u64(c, 0) as usize,
                read_u64(c, 8) as usize,
                f32::from_le_bytes(c[16..20].try_into().expect("4 bytes")) as f64,
            )
        })
        .collect();
    SparseMatrix::from_triplets(rows, cols, triplets)
}
