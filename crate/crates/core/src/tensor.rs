//! Dense row-major tensors and the handful of array operations the rest of
//! the crate computes with: elementwise algebra, 2-D cross-correlation with
//! zero padding, and axis reductions.
//!
//! Tensors are immutable values once constructed and every public operation
//! is a pure function with deterministic, left-to-right accumulation order,
//! so identical inputs give bit-identical outputs. Any operation whose
//! result would contain a NaN or infinity fails with
//! [`Error::NonFinite`](crate::Error::NonFinite).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense N-dimensional `f64` array, row-major (last axis fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Reduction kinds accepted by [`Tensor::reduce`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
    /// Flat index of the maximum within each reduced block; ties resolve to
    /// the lowest index.
    Argmax,
}

fn element_count(shape: &[usize], op: &'static str) -> Result<usize> {
    shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::invalid(op, "shape element count overflows usize"))
}

impl Tensor {
    /// Builds a tensor from a shape and row-major data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape, "Tensor::new")?;
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} implies {expected} values, got {}", data.len()),
            ));
        }
        let t = Tensor { shape, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Result<Self> {
        let n = element_count(shape, "Tensor::filled")?;
        let t = Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        };
        t.ensure_finite("Tensor::filled")?;
        Ok(t)
    }

    /// One-element tensor (shape `[1]`).
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Fills by evaluating `f` on the multi-index, row-major order.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let n = element_count(shape, "Tensor::from_fn")?;
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Tensor::new(shape.to_vec(), data)
    }

    pub fn random_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(lo, hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn random_normal(shape: &[usize], mean: f64, sd: f64, rng: &mut Rng) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| mean + sd * rng.normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row-major strides.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.shape.len()];
        for axis in (0..self.shape.len().saturating_sub(1)).rev() {
            s[axis] = s[axis + 1] * self.shape[axis + 1];
        }
        s
    }

    fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (axis, &i) in index.iter().enumerate() {
            debug_assert!(i < self.shape[axis]);
            flat = flat * self.shape[axis] + i;
        }
        flat
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.flat_index(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "Tensor::set" });
        }
        let flat = self.flat_index(index);
        self.data[flat] = value;
        Ok(())
    }

    /// Reinterprets the same data under a new shape of equal element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = element_count(shape, "Tensor::reshape")?;
        if n != self.data.len() {
            return Err(Error::shape(
                "Tensor::reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    /// Copies the slice at `index` along axis 0 (`[d0, rest..] -> [rest..]`).
    pub fn index_axis0(&self, index: usize) -> Result<Tensor> {
        if self.shape.is_empty() || index >= self.shape[0] {
            return Err(Error::invalid(
                "Tensor::index_axis0",
                format!("index {index} out of bounds for shape {:?}", self.shape),
            ));
        }
        let block = self.data.len() / self.shape[0];
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * block..(index + 1) * block].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("Tensor::stack", "empty input list"))?;
        let mut data = Vec::with_capacity(parts.len() * first.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "Tensor::stack",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(parts.len());
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Elementwise application of `f`; shape preserved.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let t = Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        };
        t.ensure_finite("Tensor::map")?;
        Ok(t)
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "Tensor::zip",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let t = Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        };
        t.ensure_finite("Tensor::zip")?;
        Ok(t)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Result<Tensor> {
        self.map(|v| v * factor)
    }

    /// Axis reduction. `axes` must be valid, without duplicates; reduced axes
    /// are removed from the shape. Accumulation walks the reduced block in
    /// row-major order, left to right.
    pub fn reduce(&self, axes: &[usize], kind: Reduce) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut reduce_mask = vec![false; rank];
        for &a in axes {
            if a >= rank {
                return Err(Error::invalid(
                    "Tensor::reduce",
                    format!("axis {a} out of bounds for rank {rank}"),
                ));
            }
            if reduce_mask[a] {
                return Err(Error::invalid("Tensor::reduce", format!("duplicate axis {a}")));
            }
            reduce_mask[a] = true;
        }

        let out_shape: Vec<usize> = (0..rank)
            .filter(|a| !reduce_mask[*a])
            .map(|a| self.shape[a])
            .collect();
        let block: usize = (0..rank)
            .filter(|a| reduce_mask[*a])
            .map(|a| self.shape[a])
            .product();
        if block == 0 && !matches!(kind, Reduce::Sum) {
            return Err(Error::invalid(
                "Tensor::reduce",
                "empty reduction block for mean/max/argmax",
            ));
        }
        let out_len: usize = out_shape.iter().product();

        // Walk the full index space once, row-major, so each reduced block is
        // consumed left to right.
        let mut acc = match kind {
            Reduce::Sum | Reduce::Mean => vec![0.0f64; out_len],
            Reduce::Max => vec![f64::NEG_INFINITY; out_len],
            Reduce::Argmax => vec![f64::NEG_INFINITY; out_len],
        };
        let mut arg = if matches!(kind, Reduce::Argmax) {
            vec![0usize; out_len]
        } else {
            Vec::new()
        };
        let mut seen = vec![0usize; out_len];

        let mut idx = vec![0usize; rank];
        for &v in &self.data {
            let mut out_flat = 0usize;
            for axis in 0..rank {
                if !reduce_mask[axis] {
                    out_flat = out_flat * self.shape[axis] + idx[axis];
                }
            }
            match kind {
                Reduce::Sum | Reduce::Mean => acc[out_flat] += v,
                Reduce::Max => {
                    if v > acc[out_flat] {
                        acc[out_flat] = v;
                    }
                }
                Reduce::Argmax => {
                    if v > acc[out_flat] {
                        acc[out_flat] = v;
                        arg[out_flat] = seen[out_flat];
                    }
                }
            }
            seen[out_flat] += 1;
            for axis in (0..rank).rev() {
                idx[axis] += 1;
                if idx[axis] < self.shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }

        let data = match kind {
            Reduce::Sum => acc,
            Reduce::Mean => acc.into_iter().map(|s| s / block as f64).collect(),
            Reduce::Max => acc,
            Reduce::Argmax => arg.into_iter().map(|i| i as f64).collect(),
        };
        let t = Tensor {
            shape: out_shape,
            data,
        };
        t.ensure_finite("Tensor::reduce")?;
        Ok(t)
    }

    /// Sum of all elements, left to right.
    pub fn sum(&self) -> f64 {
        let mut s = 0.0;
        for &v in &self.data {
            s += v;
        }
        s
    }
}

/// 2-D cross-correlation kernel bank of shape `[out_ch, in_ch, height, width]`
/// with odd spatial extents, so a zero padding of `(k-1)/2` preserves shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    weights: Tensor,
}

impl Kernel2D {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 4 {
            return Err(Error::shape(
                "Kernel2D::new",
                format!("expected [out, in, h, w], got {:?}", weights.shape()),
            ));
        }
        let (h, w) = (weights.shape()[2], weights.shape()[3]);
        if h % 2 == 0 || w % 2 == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(
                "Kernel2D::new",
                format!("spatial extents must be odd and positive, got {h}x{w}"),
            ));
        }
        Ok(Kernel2D { weights })
    }

    /// Single-in, single-out kernel from a row-major matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let h = rows.len();
        let w = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(h * w);
        for r in rows {
            if r.len() != w {
                return Err(Error::invalid("Kernel2D::from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Kernel2D::new(Tensor::new(vec![1, 1, h, w], data)?)
    }

    pub fn random(
        out_ch: usize,
        in_ch: usize,
        h: usize,
        w: usize,
        sd: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        Kernel2D::new(Tensor::new(
            vec![out_ch, in_ch, h, w],
            (0..out_ch * in_ch * h * w).map(|_| sd * rng.normal()).collect(),
        )?)
    }

    /// 1x1 kernel bank that copies input channels to output channels
    /// (requires `out_ch == in_ch`).
    pub fn identity(channels: usize) -> Result<Self> {
        let mut t = Tensor::zeros(&[channels, channels, 1, 1]);
        for c in 0..channels {
            t.set(&[c, c, 0, 0], 1.0)?;
        }
        Kernel2D::new(t)
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.weights.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.weights.shape()[3]
    }

    /// Padding that preserves spatial shape.
    pub fn same_pad(&self) -> usize {
        (self.height() - 1) / 2
    }
}

/// 2-D cross-correlation (no kernel flip) with symmetric zero padding.
///
/// `input` is `[C_in, H, W]`, or `[H, W]` as shorthand for one channel.
/// Output is `[C_out, H', W']` with `H' = H + 2*pad - kh + 1`, collapsing
/// back to `[H', W']` when both the input was rank 2 and `C_out == 1`.
pub fn conv2d(input: &Tensor, kernel: &Kernel2D, pad: usize) -> Result<Tensor> {
    let rank2 = input.rank() == 2;
    let (c_in, h, w) = match input.shape() {
        [h, w] => (1usize, *h, *w),
        [c, h, w] => (*c, *h, *w),
        other => {
            return Err(Error::shape(
                "conv2d",
                format!("expected [C,H,W] or [H,W], got {other:?}"),
            ))
        }
    };
    if kernel.in_channels() != c_in {
        return Err(Error::shape(
            "conv2d",
            format!(
                "kernel expects {} input channels, input has {c_in}",
                kernel.in_channels()
            ),
        ));
    }
    let (kh, kw) = (kernel.height(), kernel.width());
    let (oh, ow) = (
        (h + 2 * pad).checked_sub(kh - 1),
        (w + 2 * pad).checked_sub(kw - 1),
    );
    let (oh, ow) = match (oh, ow) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::invalid(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"),
            ))
        }
    };

    let c_out = kernel.out_channels();
    let mut out = vec![0.0f64; c_out * oh * ow];
    let x = input.data();
    let kw_data = kernel.weights().data();

    for oc in 0..c_out {
        for ic in 0..c_in {
            let kbase = (oc * c_in + ic) * kh * kw;
            let xbase = ic * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy >= h + pad {
                            continue;
                        }
                        let row = xbase + (iy - pad) * w;
                        for kx in 0..kw {
                            let ix = ox + kx;
                            if ix < pad || ix >= w + pad {
                                continue;
                            }
                            acc += x[row + (ix - pad)] * kw_data[kbase + ky * kw + kx];
                        }
                    }
                    out[(oc * oh + oy) * ow + ox] += acc;
                }
            }
        }
    }

    let shape = if rank2 && c_out == 1 {
        vec![oh, ow]
    } else {
        vec![c_out, oh, ow]
    };
    let t = Tensor { shape, data: out };
    t.ensure_finite("conv2d")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn column_ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[h, w], |idx| idx[1] as f64).unwrap()
    }

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { .. }));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn map_rejects_non_finite_result() {
        let t = Tensor::zeros(&[3]);
        assert!(t.map(|v| 1.0 / v).is_err());
    }

    #[test]
    fn zip_multiply_by_ones_is_identity() {
        let mut rng = Rng::new(1);
        let a = Tensor::random_uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let ones = Tensor::filled(&[3, 4], 1.0).unwrap();
        assert_eq!(a.zip(&ones, |x, y| x * y).unwrap(), a);
    }

    #[test]
    fn map_sigmoid_of_zero_is_half() {
        let z = Tensor::zeros(&[4]);
        let s = z.map(crate::math::sigmoid).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn map_tanh_of_zero_is_zero() {
        let z = Tensor::zeros(&[4]);
        let s = z.map(crate::math::tanh).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reduce_sum_all_axes() {
        let t = Tensor::filled(&[2, 2], 1.0).unwrap();
        let s = t.reduce(&[0, 1], Reduce::Sum).unwrap();
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.data(), &[4.0]);
    }

    #[test]
    fn reduce_mean_over_time_of_identical_slices() {
        let slice = Tensor::from_fn(&[2, 3], |i| (i[0] * 3 + i[1]) as f64).unwrap();
        let clip = Tensor::stack(&[&slice, &slice, &slice]).unwrap();
        let mean = clip.reduce(&[0], Reduce::Mean).unwrap();
        assert_eq!(mean, slice);
    }

    #[test]
    fn reduce_argmax_picks_first_max() {
        let t = Tensor::new(vec![3], vec![0.1, 0.7, 0.2]).unwrap();
        let a = t.reduce(&[0], Reduce::Argmax).unwrap();
        assert_eq!(a.data(), &[1.0]);
        let tie = Tensor::new(vec![3], vec![0.7, 0.7, 0.2]).unwrap();
        assert_eq!(tie.reduce(&[0], Reduce::Argmax).unwrap().data(), &[0.0]);
    }

    #[test]
    fn reduce_mean_rejects_empty_block() {
        let t = Tensor::zeros(&[0, 3]);
        assert!(t.reduce(&[0], Reduce::Mean).is_err());
    }

    #[test]
    fn conv_identity_kernel_is_identity() {
        let mut rng = Rng::new(2);
        let x = Tensor::random_uniform(&[5, 5], -1.0, 1.0, &mut rng);
        let k = Kernel2D::from_rows(&[&[1.0]]).unwrap();
        assert_eq!(conv2d(&x, &k, 0).unwrap(), x);
    }

    #[test]
    fn conv_box_kernel_counts_padded_neighbourhood() {
        let x = Tensor::filled(&[5, 5], 1.0).unwrap();
        let k = Kernel2D::from_rows(&[&[1.0; 3], &[1.0; 3], &[1.0; 3]]).unwrap();
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.at(&[2, 2]), 9.0);
        assert_eq!(y.at(&[0, 0]), 4.0);
        assert_eq!(y.at(&[0, 2]), 6.0);
        assert_eq!(y.at(&[4, 4]), 4.0);
    }

    // Hand-summed: cross-correlating the stencil
    //   [[1,0,-1],[2,0,-2],[1,0,-1]]
    // against F(r,c)=c gives 4*(c-1) - 4*(c+1) = -8 away from the borders.
    #[test]
    fn conv_negated_derivative_stencil_on_column_ramp() {
        let x = column_ramp(6, 6);
        let k = Kernel2D::from_rows(&[&[1.0, 0.0, -1.0], &[2.0, 0.0, -2.0], &[1.0, 0.0, -1.0]])
            .unwrap();
        let y = conv2d(&x, &k, 1).unwrap();
        for r in 1..5 {
            for c in 1..5 {
                assert_eq!(y.at(&[r, c]), -8.0, "at ({r},{c})");
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let k = Kernel2D::from_rows(&[&[1.0]]).unwrap();
        assert!(conv2d(&x, &k, 0).is_err());
    }

    #[test]
    fn kernel_rejects_even_extents() {
        assert!(Kernel2D::new(Tensor::zeros(&[1, 1, 2, 3])).is_err());
        assert!(Kernel2D::new(Tensor::zeros(&[1, 1, 3, 4])).is_err());
    }

    #[test]
    fn multi_channel_conv_shape() {
        let mut rng = Rng::new(3);
        let x = Tensor::random_uniform(&[3, 8, 7], -1.0, 1.0, &mut rng);
        let k = Kernel2D::random(5, 3, 3, 3, 0.1, &mut rng).unwrap();
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.shape(), &[5, 8, 7]);
    }

    #[test]
    fn stack_and_index_round_trip() {
        let a = Tensor::filled(&[2, 2], 1.0).unwrap();
        let b = Tensor::filled(&[2, 2], 2.0).unwrap();
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.index_axis0(0).unwrap(), a);
        assert_eq!(s.index_axis0(1).unwrap(), b);
    }
}
