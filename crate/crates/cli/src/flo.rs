//! Middlebury `.flo` optical-flow container.
//!
//! On-disk layout, all little-endian regardless of host: 4 magic bytes
//! "PIEH" (the IEEE-754 float 202021.25), then width and height as 32-bit
//! signed integers, then row-major interleaved `(u, v)` pairs as 32-bit
//! floats. Round-trips are bit-exact.

use std::path::Path;

use repflow_core::tensor::Tensor;

use crate::{CliError, Result};

pub const FLO_MAGIC: f32 = 202021.25;
/// Upper bound on w*h; keeps dimension arithmetic far from overflow.
const MAX_PIXELS: i64 = 1 << 28;

/// In-memory flow image with single-precision components.
#[derive(Debug, Clone, PartialEq)]
pub struct FloFile {
    pub width: u32,
    pub height: u32,
    /// Row-major interleaved `(u, v)`, length `2 * width * height`.
    pub data: Vec<f32>,
}

impl FloFile {
    /// Converts a `[2,H,W]` flow tensor (cast to single precision).
    pub fn from_flow(flow: &Tensor) -> Result<FloFile> {
        let [two, h, w] = *flow.shape() else {
            return Err(CliError::Usage(format!(
                "expected [2,H,W] flow, got {:?}",
                flow.shape()
            )));
        };
        if two != 2 {
            return Err(CliError::Usage(format!(
                "expected 2 flow components, got {two}"
            )));
        }
        let mut data = Vec::with_capacity(2 * h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(flow.at(&[0, r, c]) as f32);
                data.push(flow.at(&[1, r, c]) as f32);
            }
        }
        Ok(FloFile {
            width: w as u32,
            height: h as u32,
            data,
        })
    }

    /// Back to a `[2,H,W]` double-precision tensor.
    pub fn to_flow(&self) -> Result<Tensor> {
        let (h, w) = (self.height as usize, self.width as usize);
        let mut flow = Tensor::zeros(&[2, h, w]);
        for r in 0..h {
            for c in 0..w {
                let base = 2 * (r * w + c);
                flow.set(&[0, r, c], self.data[base] as f64)?;
                flow.set(&[1, r, c], self.data[base + 1] as f64)?;
            }
        }
        Ok(flow)
    }
}

pub fn encode_flo(flo: &FloFile) -> Result<Vec<u8>> {
    let px = flo.width as i64 * flo.height as i64;
    if flo.width == 0 || flo.height == 0 || px > MAX_PIXELS {
        return Err(CliError::Usage(format!(
            "flow dimensions {}x{} out of range",
            flo.width, flo.height
        )));
    }
    if flo.data.len() != 2 * px as usize {
        return Err(CliError::Usage(format!(
            "flow payload length {} does not match {}x{}",
            flo.data.len(),
            flo.width,
            flo.height
        )));
    }
    let mut out = Vec::with_capacity(12 + 4 * flo.data.len());
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(flo.width as i32).to_le_bytes());
    out.extend_from_slice(&(flo.height as i32).to_le_bytes());
    for v in &flo.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FloFile> {
    if bytes.len() < 12 {
        return Err(CliError::Usage("truncated .flo header".into()));
    }
    let magic = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if magic.to_bits() != FLO_MAGIC.to_bits() {
        return Err(CliError::Usage(format!(
            "bad .flo magic {magic} (expected {FLO_MAGIC})"
        )));
    }
    let width = i32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let height = i32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    if width <= 0 || height <= 0 || width as i64 * height as i64 > MAX_PIXELS {
        return Err(CliError::Usage(format!(
            "bad .flo dimensions {width}x{height}"
        )));
    }
    let n = 2 * width as usize * height as usize;
    if bytes.len() != 12 + 4 * n {
        return Err(CliError::Usage(format!(
            ".flo payload is {} bytes, expected {}",
            bytes.len() - 12,
            4 * n
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let o = 12 + 4 * i;
        data.push(f32::from_le_bytes([
            bytes[o],
            bytes[o + 1],
            bytes[o + 2],
            bytes[o + 3],
        ]));
    }
    Ok(FloFile {
        width: width as u32,
        height: height as u32,
        data,
    })
}

pub fn write_flo(path: &Path, flo: &FloFile) -> Result<()> {
    std::fs::write(path, encode_flo(flo)?).map_err(|e| CliError::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FloFile> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode_flo(&bytes)
}
