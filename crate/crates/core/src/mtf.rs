//! MTF1 raw tensor files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MTF1" | u8 precision code (4 = f32, 8 = f64) | u32 rank | rank x u32 dims | elements
//! ```
//!
//! Elements are row-major little-endian. Tensors are written with rank 4;
//! files of rank 1..=4 are accepted and left-padded with unit dims.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Precision, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MTF1";

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + 16 + t.len() * T::PRECISION.code() as usize);
    out.extend_from_slice(MAGIC);
    out.push(T::PRECISION.code());
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

fn read_u32(bytes: &[u8], at: usize) -> Option<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

/// Parse the header; returns precision, shape and the payload offset.
pub fn decode_header(bytes: &[u8]) -> std::result::Result<(Precision, [usize; 4], usize), String> {
    if bytes.len() < 9 || &bytes[..4] != MAGIC {
        return Err("missing MTF1 magic".into());
    }
    let precision = Precision::from_code(bytes[4]).ok_or_else(|| format!("unknown precision code {}", bytes[4]))?;
    let rank = read_u32(bytes, 5).ok_or("truncated header")? as usize;
    if !(1..=4).contains(&rank) {
        return Err(format!("unsupported rank {rank}"));
    }
    let mut shape = [1usize; 4];
    for i in 0..rank {
        shape[4 - rank + i] = read_u32(bytes, 9 + 4 * i).ok_or("truncated header")? as usize;
    }
    Ok((precision, shape, 9 + 4 * rank))
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> std::result::Result<Tensor<T>, String> {
    let (precision, shape, off) = decode_header(bytes)?;
    if precision != T::PRECISION {
        return Err(format!(
            "precision {precision} does not match requested {}",
            T::PRECISION
        ));
    }
    let width = precision.code() as usize;
    let n: usize = shape.iter().product();
    let payload = &bytes[off..];
    if payload.len() != n * width {
        return Err(format!("payload has {} bytes, expected {}", payload.len(), n * width));
    }
    let data = payload.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data).map_err(|e| e.to_string())
}

pub fn write<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|r| Error::format(path, r))
}

/// Read a file of either precision and convert to `T`.
pub fn read_as<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (precision, _, _) = decode_header(&bytes).map_err(|r| Error::format(path, r))?;
    match precision {
        Precision::F32 => decode::<f32>(&bytes).map(|t| t.cast()),
        Precision::F64 => decode::<f64>(&bytes).map(|t| t.cast()),
    }
    .map_err(|r| Error::format(path, r))
}
