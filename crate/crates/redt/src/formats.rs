//! Binary tensor container (`RDT1`) and checkpoints.
//!
//! A tensor file is the magic `RDT1`, a little-endian `u32` rank, `rank`
//! little-endian `u32` dimensions and a row-major payload of little-endian
//! `f32`. A checkpoint is a sequence of `(u32 name length, UTF-8 name,
//! tensor)` records closed by a zero name length.

use std::fs;
use std::path::Path;

use redt_core::numerics::{ParamStore, Scalar, Tensor};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 4] = b"RDT1";

/// Parse failure at a byte offset of the input.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{message} at byte {offset}")]
pub struct FormatError {
    pub offset: usize,
    pub message: String,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.bytes.len() - self.pos < n {
            return Err(FormatError {
                offset: self.bytes.len(),
                message: format!("truncated {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn encode_tensor(shape: &[usize], data: &[f32], out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn decode_at(r: &mut Reader<'_>) -> Result<Tensor<f32>, FormatError> {
    let start = r.pos;
    if r.take(4, "magic")? != MAGIC {
        return Err(FormatError { offset: start, message: "bad magic, expected RDT1".into() });
    }
    let rank = r.u32("rank")? as usize;
    let mut shape = Vec::with_capacity(rank.min(16));
    for _ in 0..rank {
        shape.push(r.u32("dimension")? as usize);
    }
    let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| FormatError {
        offset: start + 8,
        message: format!("shape {shape:?} overflows"),
    })?;
    let bytes = count.checked_mul(4).ok_or_else(|| FormatError { offset: start + 8, message: "payload size overflows".into() })?;
    let payload = r.take(bytes, "payload")?;
    let data = payload.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    Tensor::new(shape, data).map_err(|e| FormatError { offset: start, message: e.to_string() })
}

/// Decodes one tensor that must span the whole input.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor<f32>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let t = decode_at(&mut r)?;
    if r.pos != bytes.len() {
        return Err(FormatError { offset: r.pos, message: format!("{} trailing bytes", bytes.len() - r.pos) });
    }
    Ok(t)
}

pub fn encode_checkpoint<'a>(records: impl IntoIterator<Item = (&'a str, &'a [usize], Vec<f32>)>) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, shape, data) in records {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        encode_tensor(shape, &data, &mut out);
    }
    out.extend_from_slice(&0u32.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, FormatError> {
    let mut r = Reader { bytes, pos: 0 };
    let mut out: Vec<(String, Tensor<f32>)> = Vec::new();
    loop {
        let at = r.pos;
        let len = r.u32("name length")? as usize;
        if len == 0 {
            break;
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| FormatError { offset: at + 4, message: "name is not UTF-8".into() })?
            .to_string();
        if out.iter().any(|(n, _)| *n == name) {
            return Err(FormatError { offset: at + 4, message: format!("duplicate record `{name}`") });
        }
        let t = decode_at(&mut r)?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(FormatError { offset: r.pos, message: format!("{} bytes after terminator", bytes.len() - r.pos) });
    }
    Ok(out)
}

pub fn write_tensor(path: &Path, t: &Tensor<f32>) -> AppResult<()> {
    let mut out = Vec::with_capacity(12 + 4 * t.len());
    encode_tensor(t.shape(), t.data(), &mut out);
    fs::write(path, out).map_err(|e| AppError::io(path, e))
}

pub fn read_tensor(path: &Path) -> AppResult<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| AppError::format(path, e))
}

/// Writes every store entry, buffers included, in registration order.
pub fn write_checkpoint<T: Scalar>(path: &Path, store: &ParamStore<T>) -> AppResult<()> {
    let bytes = encode_checkpoint(
        store.entries().iter().map(|e| (e.name.as_str(), e.tensor.shape(), e.tensor.data().iter().map(|v| v.to_f64_lossy() as f32).collect())),
    );
    fs::write(path, bytes).map_err(|e| AppError::io(path, e))
}

/// Loads a checkpoint into `store`; names and shapes must match exactly.
pub fn read_checkpoint<T: Scalar>(path: &Path, store: &mut ParamStore<T>) -> AppResult<()> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    let records = decode_checkpoint(&bytes).map_err(|e| AppError::format(path, e))?;
    store
        .load_values(records.iter().map(|(n, t)| (n.as_str(), t.cast::<T>())))
        .map_err(|e| AppError::Mismatch { path: path.to_path_buf(), detail: e.to_string() })
}
