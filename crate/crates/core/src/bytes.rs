//! Raw little-endian serialization of f32 arrays plus content digests.
//!
//! Every multi-dimensional array persisted by this crate is written as its
//! elements in row-major (C) order, each as a little-endian IEEE-754 f32,
//! with no header; shape and dtype live in the accompanying JSON manifest.

use ndarray::{Array4, Dimension};
use sha2::{Digest, Sha256};

use crate::error::{PapError, Result};
use crate::num::Real;

/// Encode an array as row-major little-endian f32 bytes.
pub fn array_to_le_bytes<F: Real, D: Dimension>(array: &ndarray::Array<F, D>) -> Vec<u8> {
    let mut out = Vec::with_capacity(array.len() * 4);
    for &v in array.iter() {
        out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
    }
    out
}

/// Decode row-major little-endian f32 bytes into an N×C×H×W array.
pub fn array4_from_le_bytes<F: Real>(
    bytes: &[u8],
    shape: (usize, usize, usize, usize),
) -> Result<Array4<F>> {
    let (n, c, h, w) = shape;
    let expected = n * c * h * w * 4;
    if bytes.len() != expected {
        return Err(PapError::Format(format!(
            "expected {expected} bytes for shape {shape:?}, found {}",
            bytes.len()
        )));
    }
    let values: Vec<F> = bytes
        .chunks_exact(4)
        .map(|b| F::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
        .collect();
    Ok(Array4::from_shape_vec(shape, values).expect("length checked above"))
}

/// Decode row-major little-endian f32 bytes into a flat vector.
pub fn vec_from_le_bytes(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(PapError::Format(format!(
            "byte length {} is not a multiple of 4",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

/// Encode a flat f32 slice as little-endian bytes.
pub fn vec_to_le_bytes(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Lowercase hex SHA-256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}
