//! NTSR binary tensor container.
//!
//! Layout: `NTSR` magic, u8 version (1), u8 dtype code (1 = f32, 2 = f64),
//! u8 rank, u8 reserved (0), `rank` little-endian u64 extents, then the
//! little-endian row-major payload.

use std::path::Path;

use super::{DType, Element, Tensor};
use crate::error::{Error, Result};

pub const NTSR_MAGIC: &[u8; 4] = b"NTSR";
pub const NTSR_VERSION: u8 = 1;

const FIXED_HEADER: usize = 8;

/// Serializes a tensor, appending to `out`.
pub fn write_ntsr<E: Element>(t: &Tensor<E>, out: &mut Vec<u8>) {
    out.extend_from_slice(NTSR_MAGIC);
    out.push(NTSR_VERSION);
    out.push(E::DTYPE.code());
    out.push(u8::try_from(t.ndim()).expect("rank fits in u8"));
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * E::DTYPE.size_of());
    for &v in t.data() {
        v.write_le(out);
    }
}

/// Parses one tensor from the front of `bytes`, returning it with the number
/// of bytes consumed.
pub fn read_ntsr<E: Element>(bytes: &[u8]) -> Result<(Tensor<E>, usize)> {
    if bytes.len() < FIXED_HEADER {
        return Err(Error::Integrity(format!("NTSR header truncated ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != NTSR_MAGIC {
        return Err(Error::Format(format!("bad NTSR magic {:?}", &bytes[..4])));
    }
    if bytes[4] != NTSR_VERSION {
        return Err(Error::Version(format!("NTSR version {} unsupported", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])
        .ok_or_else(|| Error::Format(format!("unknown NTSR dtype code {}", bytes[5])))?;
    if dtype != E::DTYPE {
        return Err(Error::Format(format!("NTSR holds {:?}, expected {:?}", dtype, E::DTYPE)));
    }
    let ndim = bytes[6] as usize;
    let dims_end = FIXED_HEADER + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(Error::Integrity("NTSR extents truncated".into()));
    }
    let shape: Vec<usize> = bytes[FIXED_HEADER..dims_end]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("NTSR extents overflow: {:?}", shape)))?;
    let width = dtype.size_of();
    let payload_end = n
        .checked_mul(width)
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| Error::Format("NTSR payload size overflow".into()))?;
    if bytes.len() < payload_end {
        return Err(Error::Integrity(format!(
            "NTSR payload truncated: need {} bytes, have {}",
            payload_end,
            bytes.len()
        )));
    }
    let data = bytes[dims_end..payload_end].chunks_exact(width).map(E::read_le).collect();
    Ok((Tensor::from_parts(shape, data), payload_end))
}

pub fn write_ntsr_file<E: Element>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_ntsr(t, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Like [`read_ntsr`], but converts a payload of the other float type.
pub fn read_ntsr_as<E: Element>(bytes: &[u8]) -> Result<(Tensor<E>, usize)> {
    match bytes.get(5).copied().and_then(DType::from_code) {
        Some(DType::F32) if E::DTYPE != DType::F32 => read_ntsr::<f32>(bytes).map(|(t, n)| (t.cast(), n)),
        Some(DType::F64) if E::DTYPE != DType::F64 => read_ntsr::<f64>(bytes).map(|(t, n)| (t.cast(), n)),
        _ => read_ntsr::<E>(bytes),
    }
}

/// Reads a file holding exactly one tensor of either float type.
pub fn read_ntsr_file<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = read_ntsr_as(&bytes)?;
    if used != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after NTSR payload",
            bytes.len() - used
        )));
    }
    Ok(t)
}
