//! LVID raw video container.
//!
//! Layout: `LVID` magic, u8 version (1), u8 colorspace (1 = RGB8), u16
//! reserved, then u32 frames, height and width (all little-endian), then
//! `frames * height * width * 3` bytes, frame-major.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

pub const LVID_MAGIC: &[u8; 4] = b"LVID";
pub const LVID_VERSION: u8 = 1;
pub const COLORSPACE_RGB8: u8 = 1;

const HEADER: usize = 20;

/// An 8-bit RGB clip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawVideo {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawVideo {
    pub fn new(frames: usize, height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != frames * height * width * 3 {
            return Err(Error::Input(format!(
                "{} bytes for a {frames}x{height}x{width} RGB clip",
                pixels.len()
            )));
        }
        if frames % 4 != 1 {
            return Err(Error::Input(format!("frame count {frames} is not 1 mod 4")));
        }
        Ok(RawVideo { frames, height, width, pixels })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.pixels.len());
        out.extend_from_slice(LVID_MAGIC);
        out.push(LVID_VERSION);
        out.push(COLORSPACE_RGB8);
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in [self.frames, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::Integrity(format!("LVID header truncated ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != LVID_MAGIC {
            return Err(Error::Format(format!("bad LVID magic {:?}", &bytes[..4])));
        }
        if bytes[4] != LVID_VERSION {
            return Err(Error::Version(format!("LVID version {} unsupported", bytes[4])));
        }
        if bytes[5] != COLORSPACE_RGB8 {
            return Err(Error::Format(format!("LVID colorspace {} unsupported", bytes[5])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
        let (frames, height, width) = (u32_at(8), u32_at(12), u32_at(16));
        let expected = frames
            .checked_mul(height)
            .and_then(|n| n.checked_mul(width))
            .and_then(|n| n.checked_mul(3))
            .ok_or_else(|| Error::Format("LVID extents overflow".into()))?;
        let payload = &bytes[HEADER..];
        if payload.len() != expected {
            return Err(Error::Integrity(format!("LVID payload is {} bytes, header implies {expected}", payload.len())));
        }
        RawVideo::new(frames, height, width, payload.to_vec())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        RawVideo::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// `[F, H, W, 3]` tensor with `v / 127.5 - 1`.
    pub fn to_tensor<E: Element>(&self) -> Tensor<E> {
        let data = self.pixels.iter().map(|&v| E::lit(v as f64 / 127.5 - 1.0)).collect();
        Tensor::new(&[self.frames, self.height, self.width, 3], data).expect("validated extents")
    }

    /// Quantizes a `[F, H, W, 3]` tensor in `[-1, 1]` to 8 bits (clamped,
    /// rounded to nearest).
    pub fn from_tensor<E: Element>(t: &Tensor<E>) -> Result<Self> {
        let &[f, h, w, 3] = t.shape() else {
            return Err(Error::Input(format!("expected [F, H, W, 3], got {:?}", t.shape())));
        };
        let pixels = t.data().iter().map(|&v| quantize(v.to_f64().unwrap_or(f64::NAN))).collect();
        RawVideo::new(f, h, w, pixels)
    }
}

/// Maps `[-1, 1]` to `0..=255`; NaN maps to 0.
pub fn quantize(v: f64) -> u8 {
    if v.is_nan() {
        return 0;
    }
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RawVideo {
        RawVideo::new(5, 2, 3, (0..90).map(|i| (i * 37 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn bytes_roundtrip_and_layout() {
        let v = sample();
        let b = v.to_bytes();
        assert_eq!(&b[..8], b"LVID\x01\x01\x00\x00");
        assert_eq!(&b[8..20], &[5, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(RawVideo::from_bytes(&b).unwrap(), v);
    }

    #[test]
    fn corrupt_inputs() {
        let b = sample().to_bytes();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(RawVideo::from_bytes(&bad), Err(Error::Format(_))));
        assert!(matches!(RawVideo::from_bytes(&b[..b.len() - 1]), Err(Error::Integrity(_))));
        assert!(matches!(RawVideo::from_bytes(&b[..10]), Err(Error::Integrity(_))));
        let mut v2 = b.clone();
        v2[4] = 2;
        assert!(matches!(RawVideo::from_bytes(&v2), Err(Error::Version(_))));
        assert!(matches!(RawVideo::new(4, 1, 1, vec![0; 12]), Err(Error::Input(_))));
    }

    #[test]
    fn tensor_conversion_is_lossless_for_u8() {
        let v = sample();
        let t: Tensor<f32> = v.to_tensor();
        assert!(t.max_abs() <= 1.0);
        assert_eq!(RawVideo::from_tensor(&t).unwrap(), v);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.0), 128);
    }
}
