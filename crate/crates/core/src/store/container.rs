//! FMTC: one tensor per file.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "FMTC"
//! 4       1           version (1)
//! 5       1           dtype (1 = f32, 2 = f16)
//! 6       1           ndim
//! 7       1           reserved (0)
//! 8       8 * ndim    dims, u64 little-endian
//! ...     n * size    row-major little-endian payload
//! ```

use std::fs;
use std::path::Path;

use half::f16;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FMTC";
pub const VERSION: u8 = 1;
const FIXED_HEADER: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F16,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F16 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::F16),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 => 2,
        }
    }
}

fn format_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn encode(tensor: &Tensor<f32>, dtype: Dtype) -> Result<Vec<u8>> {
    let ndim =
        u8::try_from(tensor.ndim()).map_err(|_| Error::shape("FMTC supports at most 255 dims"))?;
    let mut out =
        Vec::with_capacity(FIXED_HEADER + 8 * tensor.ndim() + tensor.len() * dtype.size());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), ndim, 0]);
    for &d in tensor.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for (k, &v) in tensor.values().iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::data(format!(
                "refusing to store non-finite value at flat index {k}"
            )));
        }
        match dtype {
            Dtype::F32 => out.extend_from_slice(&v.to_le_bytes()),
            Dtype::F16 => {
                let h = f16::from_f32(v);
                if !h.is_finite() {
                    return Err(Error::data(format!(
                        "value {v} at flat index {k} overflows f16"
                    )));
                }
                out.extend_from_slice(&h.to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < FIXED_HEADER {
        return Err(format_err(bytes.len(), "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(format_err(0, format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(format_err(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = Dtype::from_code(bytes[5])
        .ok_or_else(|| format_err(5, format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(format_err(6, "ndim must be at least 1"));
    }
    if bytes[7] != 0 {
        return Err(format_err(7, "reserved byte must be zero"));
    }
    let header = FIXED_HEADER + 8 * ndim;
    if bytes.len() < header {
        return Err(format_err(
            bytes.len(),
            format!("truncated dims, header needs {header} bytes"),
        ));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for k in 0..ndim {
        let at = FIXED_HEADER + 8 * k;
        let raw = u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"));
        let d = usize::try_from(raw)
            .ok()
            .filter(|&d| d > 0)
            .ok_or_else(|| format_err(at, format!("invalid dim {raw}")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| format_err(at, "element count overflows"))?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    let expected = count
        .checked_mul(dtype.size())
        .ok_or_else(|| format_err(header, "payload size overflows"))?;
    if payload.len() < expected {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload, expected {expected} bytes"),
        ));
    }
    if payload.len() > expected {
        return Err(format_err(
            header + expected,
            "trailing bytes after payload",
        ));
    }
    let values: Vec<f32> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")))
            .collect(),
        Dtype::F16 => payload
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes(c.try_into().expect("2-byte chunk")).to_f32())
            .collect(),
    };
    Tensor::from_external(dims, values)
}

pub fn write_tensor(path: impl AsRef<Path>, tensor: &Tensor<f32>, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(tensor, dtype)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
