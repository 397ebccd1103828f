//! Artifact persistence.
//!
//! Matrices use a small self-describing binary format: the 8 magic bytes
//! `SROMMAT1`, the row and column counts as little-endian `u64`, then the
//! entries in row-major order as little-endian `f64`. The CSV export writes
//! one line per row, entries separated by `,` in shortest round-trip form
//! (plain decimal for magnitudes in `[1e-4, 1e16)` and zero, exponent form
//! otherwise), with a trailing newline and no header.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Result, SromError};

pub const MATRIX_MAGIC: &[u8; 8] = b"SROMMAT1";
const HEADER_LEN: usize = 24;

pub fn encode_matrix(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SromError::NonFinite);
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_matrix(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < HEADER_LEN {
        return Err(if bytes.len() >= 8 && &bytes[..8] != MATRIX_MAGIC {
            SromError::BadMagic
        } else {
            SromError::TruncatedFile
        });
    }
    if &bytes[..8] != MATRIX_MAGIC {
        return Err(SromError::BadMagic);
    }
    let word = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes"));
    let (rows, cols) = (word(8) as usize, word(16) as usize);
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or(SromError::TruncatedFile)?;
    if bytes.len() < expected {
        return Err(SromError::TruncatedFile);
    }
    let body = &bytes[HEADER_LEN..expected];
    let m = DMatrix::from_fn(rows, cols, |i, j| {
        let at = 8 * (i * cols + j);
        f64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes"))
    });
    if m.iter().any(|v| !v.is_finite()) {
        return Err(SromError::NonFinite);
    }
    Ok(m)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_matrix(m)?;
    fs::write(path, bytes).map_err(|e| SromError::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    match fs::read(path) {
        Ok(bytes) => decode_matrix(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(SromError::TruncatedFile),
        Err(e) => Err(SromError::io(path, e)),
    }
}

fn format_entry(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 || (1e-4..1e16).contains(&a) {
        v.to_string()
    } else {
        format!("{v:e}")
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format_entry(m[(i, j)])).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv(path: impl AsRef<Path>, m: &DMatrix<f64>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| SromError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(matrix_to_csv(m).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| SromError::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| SromError::Serde(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| SromError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| SromError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| SromError::Serde(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| SromError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn create_dir(path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::create_dir_all(path).map_err(|e| SromError::io(path, e))
}
