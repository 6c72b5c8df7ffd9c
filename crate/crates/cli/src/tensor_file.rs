//! Binary tensor container.
//!
//! ```text
//! magic    8 bytes  "PKTENSOR"
//! dtype    1 byte   0 = f32, 1 = f64
//! ndim     u64 LE
//! dims     ndim x u64 LE
//! payload  row-major little-endian values
//! ```

use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use thiserror::Error;

use crate::atomic::write_atomic;

pub const MAGIC: &[u8; 8] = b"PKTENSOR";
/// Refuse headers claiming more dimensions than this.
const MAX_NDIM: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"PKTENSOR\"")]
    BadMagic([u8; 8]),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("dtype mismatch: expected {expected:?}, file has {found:?}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("truncated {section}: expected {expected} bytes, found {found}")]
    Truncated {
        section: &'static str,
        expected: u64,
        found: u64,
    },
    #[error("{0} unexpected bytes after the payload")]
    TrailingBytes(u64),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("tensor values must be finite")]
    NonFinite,
}

impl TensorError {
    /// Stable identifier for each failure class.
    pub fn code(&self) -> &'static str {
        match self {
            TensorError::Io(_) => "io",
            TensorError::BadMagic(_) => "bad_magic",
            TensorError::UnknownDtype(_) => "unknown_dtype",
            TensorError::DtypeMismatch { .. } => "dtype_mismatch",
            TensorError::Truncated { .. } => "truncated",
            TensorError::TrailingBytes(_) => "trailing_bytes",
            TensorError::Header(_) => "bad_header",
            TensorError::NonFinite => "non_finite",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// f32 payloads are widened exactly.
    pub values: Vec<f64>,
}

fn element_count(dims: &[usize]) -> Result<usize, TensorError> {
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| TensorError::Header(format!("dims {dims:?} overflow")))
}

pub fn encode(dtype: DType, dims: &[usize], values: &[f64]) -> Result<Vec<u8>, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::Header("a tensor needs at least one dimension".into()));
    }
    let n = element_count(dims)?;
    if n != values.len() {
        return Err(TensorError::Header(format!(
            "dims {dims:?} hold {n} values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite);
    }
    let mut out = Vec::with_capacity(17 + 8 * dims.len() + dtype.size() * n);
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.extend_from_slice(&(dims.len() as u64).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F64 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        DType::F32 => values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: u64, section: &'static str) -> Result<&'a [u8], TensorError> {
    if (bytes.len() as u64) < n {
        return Err(TensorError::Truncated {
            section,
            expected: n,
            found: bytes.len() as u64,
        });
    }
    let (head, rest) = bytes.split_at(n as usize);
    *bytes = rest;
    Ok(head)
}

fn take_u64(bytes: &mut &[u8], section: &'static str) -> Result<u64, TensorError> {
    let b = take(bytes, 8, section)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

/// Parses a whole file image. The header is validated before any payload
/// value is decoded.
pub fn decode(mut bytes: &[u8]) -> Result<Tensor, TensorError> {
    let magic = take(&mut bytes, 8, "magic")?;
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic.try_into().expect("8 bytes")));
    }
    let code = take(&mut bytes, 1, "dtype")?[0];
    let dtype = DType::from_code(code).ok_or(TensorError::UnknownDtype(code))?;
    let ndim = take_u64(&mut bytes, "ndim")?;
    if ndim == 0 || ndim > MAX_NDIM {
        return Err(TensorError::Header(format!("ndim {ndim} outside 1..={MAX_NDIM}")));
    }
    let dims = (0..ndim)
        .map(|_| {
            let d = take_u64(&mut bytes, "dims")?;
            usize::try_from(d).map_err(|_| TensorError::Header(format!("dimension {d} too large")))
        })
        .collect::<Result<Vec<usize>, _>>()?;
    let n = element_count(&dims)?;
    let payload_len = (n as u64)
        .checked_mul(dtype.size() as u64)
        .ok_or_else(|| TensorError::Header(format!("dims {dims:?} overflow")))?;
    let payload = take(&mut bytes, payload_len, "payload")?;
    if !bytes.is_empty() {
        return Err(TensorError::TrailingBytes(bytes.len() as u64));
    }
    let values = match dtype {
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
    };
    Ok(Tensor { dtype, dims, values })
}

pub fn write_tensor(path: &Path, dims: &[usize], values: &[f64]) -> Result<(), TensorError> {
    write_tensor_as(path, DType::F64, dims, values)
}

pub fn write_tensor_as(path: &Path, dtype: DType, dims: &[usize], values: &[f64]) -> Result<(), TensorError> {
    let bytes = encode(dtype, dims, values)?;
    write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor, TensorError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// Reads a tensor that must have been stored as `dtype`.
pub fn read_tensor_as(path: &Path, dtype: DType) -> Result<Tensor, TensorError> {
    let t = read_tensor(path)?;
    if t.dtype != dtype {
        return Err(TensorError::DtypeMismatch {
            expected: dtype,
            found: t.dtype,
        });
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let bytes = encode(DType::F64, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(&bytes[..8], b"PKTENSOR");
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..17], &2u64.to_le_bytes());
        assert_eq!(&bytes[17..25], &2u64.to_le_bytes());
        assert_eq!(&bytes[33..41], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 8 + 1 + 8 + 16 + 32);
    }

    #[test]
    fn dims_must_match_values() {
        assert!(encode(DType::F64, &[2, 3], &[0.0; 5]).is_err());
        assert!(encode(DType::F64, &[], &[]).is_err());
        assert!(matches!(encode(DType::F64, &[1], &[f64::NAN]), Err(TensorError::NonFinite)));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode(DType::F32, &[1], &[1.5]).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(TensorError::TrailingBytes(1))));
    }
}
