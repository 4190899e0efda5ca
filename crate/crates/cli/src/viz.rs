//! Colour-wheel rendering of flow fields as binary PPM ("P6") images.
//!
//! Hue encodes the flow angle, saturation the magnitude relative to the
//! normalisation maximum, at full brightness: zero flow renders white, and
//! flipping a vector lands on the opposite side of the wheel.

use repflow_core::tensor::Tensor;

use crate::{CliError, Result};

/// Standard HSV to RGB, `h` in radians, `s`/`v` in `[0, 1]`.
fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = (h.rem_euclid(2.0 * std::f64::consts::PI)) / (2.0 * std::f64::consts::PI) * 6.0;
    let sector = h6.floor() as i64 % 6;
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    let to_byte = |x: f64| (x.clamp(0.0, 1.0) * 255.0).round() as u8;
    [to_byte(r), to_byte(g), to_byte(b)]
}

/// Renders `[2,H,W]` flow as a PPM byte stream. `max_magnitude = None`
/// normalises by the largest magnitude in the field (an all-zero field
/// renders all white).
pub fn flow_to_ppm(flow: &Tensor, max_magnitude: Option<f64>) -> Result<Vec<u8>> {
    let [two, h, w] = *flow.shape() else {
        return Err(CliError::Usage(format!(
            "expected [2,H,W] flow, got {:?}",
            flow.shape()
        )));
    };
    if two != 2 {
        return Err(CliError::Usage("expected 2 flow components".into()));
    }
    if let Some(m) = max_magnitude {
        if !(m > 0.0) || !m.is_finite() {
            return Err(CliError::Usage(format!(
                "max magnitude must be positive and finite, got {m}"
            )));
        }
    }

    let mut max = match max_magnitude {
        Some(m) => m,
        None => {
            let mut best = 0.0f64;
            for r in 0..h {
                for c in 0..w {
                    let (u, v) = (flow.at(&[0, r, c]), flow.at(&[1, r, c]));
                    best = best.max((u * u + v * v).sqrt());
                }
            }
            best
        }
    };
    if max == 0.0 {
        max = 1.0;
    }

    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            let (u, v) = (flow.at(&[0, r, c]), flow.at(&[1, r, c]));
            let magnitude = (u * u + v * v).sqrt();
            let hue = v.atan2(u);
            let saturation = (magnitude / max).min(1.0);
            out.extend_from_slice(&hsv_to_rgb(hue, saturation, 1.0));
        }
    }
    Ok(out)
}

/// Hue (radians in `[0, 2pi)`) recovered from an RGB pixel; test helper for
/// the wheel symmetry.
pub fn rgb_hue(rgb: [u8; 3]) -> Option<f64> {
    let r = rgb[0] as f64 / 255.0;
    let g = rgb[1] as f64 / 255.0;
    let b = rgb[2] as f64 / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    if d == 0.0 {
        return None; // grey has no hue
    }
    let h6 = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    Some(h6 / 6.0 * 2.0 * std::f64::consts::PI)
}
