//! Binary PGM ("P5") reader/writer. Values are scaled to `[0, 1]` on read by
//! division by maxval; maxval is limited to 255 (one byte per pixel).

use std::path::Path;

use repflow_core::tensor::Tensor;

use crate::{CliError, Result};

/// Parses a binary PGM image into a `[H, W]` tensor of `[0, 1]` values.
pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0usize;

    // Header tokens are whitespace separated; '#' starts a comment to EOL.
    let next_token = |pos: &mut usize| -> Result<String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(CliError::Usage("truncated PGM header".into()));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    let magic = next_token(&mut pos)?;
    if magic != "P5" {
        return Err(CliError::Usage(format!(
            "unsupported image format {magic:?} (binary PGM \"P5\" expected)"
        )));
    }
    let parse_dim = |tok: String, what: &str| -> Result<usize> {
        tok.parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| CliError::Usage(format!("bad PGM {what}: {tok:?}")))
    };
    let width = parse_dim(next_token(&mut pos)?, "width")?;
    let height = parse_dim(next_token(&mut pos)?, "height")?;
    let maxval = parse_dim(next_token(&mut pos)?, "maxval")?;
    if maxval > 255 {
        return Err(CliError::Usage(format!(
            "PGM maxval {maxval} exceeds 255 (16-bit images are not supported)"
        )));
    }

    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(CliError::Usage("malformed PGM header terminator".into()));
    }
    pos += 1;

    let need = width * height;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| CliError::Usage(format!("truncated PGM payload (need {need} bytes)")))?;
    let scale = 1.0 / maxval as f64;
    let data: Vec<f64> = payload.iter().map(|&b| b as f64 * scale).collect();
    Ok(Tensor::new(vec![height, width], data)?)
}

pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    parse_pgm(&bytes).map_err(|e| match e {
        CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Encodes a `[H, W]` tensor (values clamped to `[0, 1]`) as binary PGM with
/// maxval 255.
pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = *image.shape() else {
        return Err(CliError::Usage(format!(
            "write_pgm expects [H,W], got {:?}",
            image.shape()
        )));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for &v in image.data() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_pgm(image)?).map_err(|e| CliError::io(path, e))
}
