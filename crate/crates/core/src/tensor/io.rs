//! Binary tensor files: `"TNSR"`, version `u32`, rank `u32`, `rank` dims as
//! `u32`, then the payload as little-endian `f64`.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u32 = 1;

pub fn encode(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * tensor.rank() + 8 * tensor.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a tensor from `bytes`; `path` is only used for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let err = |offset: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset,
        msg: msg.to_string(),
    };
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| err(offset, "truncated header"))
    };

    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(err(0, "bad magic, expected TNSR"));
    }
    let version = read_u32(4)?;
    if version != VERSION {
        return Err(err(4, &format!("unsupported version {version}")));
    }
    let rank = read_u32(8)? as usize;
    if rank == 0 || rank > 8 {
        return Err(err(8, &format!("unsupported rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u32(12 + 4 * i)? as usize);
    }
    let start = 12 + 4 * rank;
    let numel: usize = shape.iter().product();
    let end = start + 8 * numel;
    if bytes.len() < end {
        return Err(err(bytes.len(), &format!("truncated payload, expected {end} bytes")));
    }
    if bytes.len() > end {
        return Err(err(end, "trailing bytes after payload"));
    }
    let data = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| err(12, &e.to_string()))
}

pub fn write(path: &Path, tensor: &Tensor) -> Result<()> {
    fs::write(path, encode(tensor)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
