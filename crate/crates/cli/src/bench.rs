//! Forward-runtime benchmark for the flow layer.
//!
//! Medians over at least five timed runs after at least one discarded
//! warm-up run, per (resolution, channels, iterations) grid point. Runs are
//! strictly serial — parallel timing would contaminate the measurements.
//! Absolute numbers are reported, never asserted; the interesting property
//! is how the median moves with iteration count and pixel count.

use std::hint::black_box;
use std::time::Instant;

use repflow_core::flow::{rep_flow_layer, RepFlowLayerConfig};
use repflow_core::rng::Rng;
use repflow_core::tensor::Tensor;

use crate::{CliError, Result};

/// Arithmetic width of the timed kernel. Double is the reference path;
/// single precision is the opt-in for speed comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub channels: Vec<usize>,
    pub iters: Vec<usize>,
    pub runs: usize,
    pub warmup: usize,
    pub precision: Precision,
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs < 5 {
            return Err(CliError::Usage(format!(
                "bench.runs must be at least 5, got {}",
                self.runs
            )));
        }
        if self.warmup < 1 {
            return Err(CliError::Usage("bench.warmup must be at least 1".into()));
        }
        if self.resolutions.is_empty() || self.channels.is_empty() || self.iters.is_empty() {
            return Err(CliError::Usage("empty benchmark grid".into()));
        }
        for &r in &self.resolutions {
            if r < 3 {
                return Err(CliError::Usage(format!("resolution {r} below 3")));
            }
        }
        for &i in &self.iters {
            if i == 0 {
                return Err(CliError::Usage("iteration counts must be positive".into()));
            }
        }
        for &c in &self.channels {
            if c == 0 {
                return Err(CliError::Usage("channel counts must be positive".into()));
            }
        }
        Ok(())
    }
}

/// One measured grid point.
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub resolution: usize,
    pub channels: usize,
    pub iters: usize,
    pub median_s: f64,
    pub iqr_s: f64,
    pub runs: usize,
}

/// Sorted-sample median and interquartile range (nearest-rank quartiles).
fn median_iqr(samples: &mut [f64]) -> (f64, f64) {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    let n = samples.len();
    let median = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    let q1 = samples[n / 4];
    let q3 = samples[(3 * n) / 4];
    (median, q3 - q1)
}

/// Runs the whole grid; rows appear in (resolution, channels, iters) order.
pub fn run_grid(cfg: &BenchConfig, seed: u64) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &resolution in &cfg.resolutions {
        for &channels in &cfg.channels {
            for &iters in &cfg.iters {
                let mut rng = Rng::new(seed ^ ((resolution as u64) << 24) ^ (iters as u64));
                let row = match cfg.precision {
                    Precision::F64 => {
                        time_f64_point(resolution, channels, iters, cfg, &mut rng)?
                    }
                    Precision::F32 => {
                        time_f32_point(resolution, channels, iters, cfg, &mut rng)?
                    }
                };
                rows.push(row);
            }
        }
    }
    Ok(rows)
}

fn time_f64_point(
    resolution: usize,
    channels: usize,
    iters: usize,
    cfg: &BenchConfig,
    rng: &mut Rng,
) -> Result<BenchRow> {
    let mut layer = RepFlowLayerConfig::new(channels, channels, channels, rng)
        .map_err(CliError::from)?;
    layer.flow_params = layer.flow_params.with_n_iters(iters);
    let features =
        Tensor::random_uniform(&[2, channels, resolution, resolution], -1.0, 1.0, rng);

    for _ in 0..cfg.warmup {
        black_box(rep_flow_layer(black_box(&features), &layer)?);
    }
    let mut times = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let start = Instant::now();
        black_box(rep_flow_layer(black_box(&features), &layer)?);
        times.push(start.elapsed().as_secs_f64());
    }
    let (median_s, iqr_s) = median_iqr(&mut times);
    Ok(BenchRow {
        resolution,
        channels,
        iters,
        median_s,
        iqr_s,
        runs: cfg.runs,
    })
}

fn time_f32_point(
    resolution: usize,
    channels: usize,
    iters: usize,
    cfg: &BenchConfig,
    rng: &mut Rng,
) -> Result<BenchRow> {
    let n = resolution * resolution;
    let frames: Vec<Vec<f32>> = (0..2)
        .map(|_| (0..channels * n).map(|_| rng.uniform(-1.0, 1.0) as f32).collect())
        .collect();
    let reduce: Vec<f32> = (0..channels * channels)
        .map(|_| (rng.normal() / channels as f64) as f32)
        .collect();
    let params = flow32::Params::defaults(iters);

    let run = || {
        let r1 = flow32::reduce_1x1(&frames[0], channels, channels, n, &reduce);
        let r2 = flow32::reduce_1x1(&frames[1], channels, channels, n, &reduce);
        let mut acc = 0.0f32;
        for c in 0..channels {
            let u = flow32::rep_flow(
                &r1[c * n..(c + 1) * n],
                &r2[c * n..(c + 1) * n],
                resolution,
                resolution,
                &params,
            );
            acc += u[0] + u[n];
        }
        acc
    };

    for _ in 0..cfg.warmup {
        black_box(run());
    }
    let mut times = Vec::with_capacity(cfg.runs);
    for _ in 0..cfg.runs {
        let start = Instant::now();
        black_box(run());
        times.push(start.elapsed().as_secs_f64());
    }
    let (median_s, iqr_s) = median_iqr(&mut times);
    Ok(BenchRow {
        resolution,
        channels,
        iters,
        median_s,
        iqr_s,
        runs: cfg.runs,
    })
}

/// Self-contained single-precision forward of the flow solver, used only by
/// the benchmark's `f32` mode. Mirrors the double-precision math of the core
/// layer; a unit test pins it against the reference within single-precision
/// accumulation error.
pub mod flow32 {
    pub struct Params {
        pub tau: f32,
        pub theta: f32,
        pub lambda: f32,
        pub eps: f32,
        pub n_iters: usize,
    }

    impl Params {
        pub fn defaults(n_iters: usize) -> Params {
            Params {
                tau: 0.25,
                theta: 0.3,
                lambda: 0.15,
                eps: 1e-12,
                n_iters,
            }
        }
    }

    const SOBEL_X: [[f32; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    const SOBEL_Y: [[f32; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    const DIV_WX: [[f32; 3]; 3] = [[0.0, 0.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
    const DIV_WY: [[f32; 3]; 3] = [[0.0, -1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];

    /// 3x3 cross-correlation with zero padding.
    fn conv3(input: &[f32], h: usize, w: usize, k: &[[f32; 3]; 3], out: &mut [f32]) {
        for r in 0..h {
            for c in 0..w {
                let mut acc = 0.0f32;
                for (ky, krow) in k.iter().enumerate() {
                    let y = r as isize + ky as isize - 1;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for (kx, &kv) in krow.iter().enumerate() {
                        if kv == 0.0 {
                            continue;
                        }
                        let x = c as isize + kx as isize - 1;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        acc += kv * input[y as usize * w + x as usize];
                    }
                }
                out[r * w + c] = acc;
            }
        }
    }

    /// 1x1 channel-mixing convolution over a `[C_in, n]` flat layout.
    pub fn reduce_1x1(
        input: &[f32],
        c_out: usize,
        c_in: usize,
        n: usize,
        weights: &[f32],
    ) -> Vec<f32> {
        let mut out = vec![0.0f32; c_out * n];
        for oc in 0..c_out {
            for ic in 0..c_in {
                let wv = weights[oc * c_in + ic];
                for i in 0..n {
                    out[oc * n + i] += wv * input[ic * n + i];
                }
            }
        }
        out
    }

    /// Unrolled solver over one frame pair; returns `[u_x, u_y]` planes
    /// concatenated.
    pub fn rep_flow(f1: &[f32], f2: &[f32], h: usize, w: usize, p: &Params) -> Vec<f32> {
        let n = h * w;
        let mut gx = vec![0.0f32; n];
        let mut gy = vec![0.0f32; n];
        conv3(f2, h, w, &SOBEL_X, &mut gx);
        conv3(f2, h, w, &SOBEL_Y, &mut gy);
        let rho_c: Vec<f32> = f2.iter().zip(f1).map(|(a, b)| a - b).collect();

        let lt = p.lambda * p.theta;
        let ratio = p.tau / p.theta;
        let one_eps = 1.0 + p.eps;
        let mut ux = vec![0.0f32; n];
        let mut uy = vec![0.0f32; n];
        let mut pxx = vec![0.0f32; n];
        let mut pxy = vec![0.0f32; n];
        let mut pyx = vec![0.0f32; n];
        let mut pyy = vec![0.0f32; n];
        let mut scratch_a = vec![0.0f32; n];
        let mut scratch_b = vec![0.0f32; n];
        let mut dx = vec![0.0f32; n];
        let mut dy = vec![0.0f32; n];

        for _ in 0..p.n_iters {
            // v-step with the three-branch threshold, then u = v + theta*div(p).
            conv3(&pxx, h, w, &DIV_WX, &mut scratch_a);
            conv3(&pxy, h, w, &DIV_WY, &mut scratch_b);
            let div_x: Vec<f32> = scratch_a.iter().zip(&scratch_b).map(|(a, b)| a + b).collect();
            conv3(&pyx, h, w, &DIV_WX, &mut scratch_a);
            conv3(&pyy, h, w, &DIV_WY, &mut scratch_b);
            let div_y: Vec<f32> = scratch_a.iter().zip(&scratch_b).map(|(a, b)| a + b).collect();

            for i in 0..n {
                let g2 = gx[i] * gx[i] + gy[i] * gy[i];
                let rho = rho_c[i] + gx[i] * ux[i] + gy[i] * uy[i];
                let thr = lt * g2;
                let (vx, vy) = if rho < -thr {
                    (ux[i] + lt * gx[i], uy[i] + lt * gy[i])
                } else if rho > thr {
                    (ux[i] - lt * gx[i], uy[i] - lt * gy[i])
                } else {
                    let d = g2 + p.eps;
                    (ux[i] - rho * gx[i] / d, uy[i] - rho * gy[i] / d)
                };
                ux[i] = vx + p.theta * div_x[i];
                uy[i] = vy + p.theta * div_y[i];
            }

            // Dual update per flow component.
            conv3(&ux, h, w, &SOBEL_X, &mut dx);
            conv3(&ux, h, w, &SOBEL_Y, &mut dy);
            for i in 0..n {
                let norm = (dx[i] * dx[i] + dy[i] * dy[i]).sqrt();
                let den = ratio * norm + one_eps;
                pxx[i] = (pxx[i] + ratio * dx[i]) / den;
                pxy[i] = (pxy[i] + ratio * dy[i]) / den;
            }
            conv3(&uy, h, w, &SOBEL_X, &mut dx);
            conv3(&uy, h, w, &SOBEL_Y, &mut dy);
            for i in 0..n {
                let norm = (dx[i] * dx[i] + dy[i] * dy[i]).sqrt();
                let den = ratio * norm + one_eps;
                pyx[i] = (pyx[i] + ratio * dx[i]) / den;
                pyy[i] = (pyy[i] + ratio * dy[i]) / den;
            }
        }

        let mut out = ux;
        out.extend_from_slice(&uy);
        out
    }
}
