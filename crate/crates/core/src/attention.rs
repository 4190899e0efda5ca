//! Class activation maps and spatial softmax attention.
//!
//! A class activation map is the per-location weighted sum of the final
//! convolutional activations, `F_c(i) = sum_l w_l^c * a_l(i)`. The map of
//! the winning class is turned into attention weights by a softmax over all
//! spatial positions (one normalisation over `H*W`, broadcast across
//! channels): `f_SA(i) = f(i) * exp(M(i)) / sum_i' exp(M(i'))`. The softmax
//! subtracts the maximum before exponentiating; by shift invariance this
//! changes nothing mathematically and keeps the exponentials bounded.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Classifier weight matrix `[K_classes, L_units]`; row `c` weights the
/// activation maps when forming the CAM for class `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct CamWeights {
    weights: Tensor,
}

impl CamWeights {
    pub fn new(weights: Tensor) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::shape(
                "CamWeights::new",
                format!("expected [K,L], got {:?}", weights.shape()),
            ));
        }
        Ok(CamWeights { weights })
    }

    pub fn classes(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn units(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    /// Weight row for one class.
    pub fn row(&self, class: usize) -> Result<Tensor> {
        self.weights.index_axis0(class)
    }
}

/// `F_c(i) = sum_l w[l] * activations[l, i]`.
pub fn cam(class_weights_row: &Tensor, activations: &Tensor) -> Result<Tensor> {
    if class_weights_row.rank() != 1
        || activations.rank() != 3
        || class_weights_row.shape()[0] != activations.shape()[0]
    {
        return Err(Error::shape(
            "cam",
            format!(
                "weights {:?} vs activations {:?}",
                class_weights_row.shape(),
                activations.shape()
            ),
        ));
    }
    let (l, h, w) = (
        activations.shape()[0],
        activations.shape()[1],
        activations.shape()[2],
    );
    let mut out = Tensor::zeros(&[h, w]);
    for unit in 0..l {
        let coef = class_weights_row.data()[unit];
        for i in 0..h * w {
            out.data_mut()[i] += coef * activations.data()[unit * h * w + i];
        }
    }
    Ok(out)
}

/// Index of the largest logit; ties break toward the lowest index.
pub fn winning_class(logits: &Tensor) -> Result<usize> {
    if logits.rank() != 1 || logits.is_empty() {
        return Err(Error::invalid(
            "winning_class",
            format!("expected non-empty [K], got {:?}", logits.shape()),
        ));
    }
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Softmax weights of a saliency map over all spatial positions.
pub fn attention_weights(m_c: &Tensor) -> Result<Tensor> {
    if m_c.rank() != 2 {
        return Err(Error::shape(
            "attention_weights",
            format!("expected [H,W], got {:?}", m_c.shape()),
        ));
    }
    let mut max = f64::NEG_INFINITY;
    for &v in m_c.data() {
        max = math::max(max, v);
    }
    let e = m_c.map(|v| math::exp(v - max))?;
    let s = e.sum();
    e.map(|v| v / s)
}

/// `f_SA = f * softmax(M_c)`, the softmax taken over spatial positions and
/// broadcast over channels.
pub fn spatial_attention(f: &Tensor, m_c: &Tensor) -> Result<Tensor> {
    if f.rank() != 3 || m_c.rank() != 2 || f.shape()[1..] != m_c.shape()[..] {
        return Err(Error::shape(
            "spatial_attention",
            format!("features {:?} vs map {:?}", f.shape(), m_c.shape()),
        ));
    }
    let weights = attention_weights(m_c)?;
    let hw = weights.len();
    let mut out = f.clone();
    for c in 0..f.shape()[0] {
        for i in 0..hw {
            out.data_mut()[c * hw + i] = f.data()[c * hw + i] * weights.data()[i];
        }
    }
    out.map(|v| v) // finiteness check
}

/// Taped twin of [`cam`].
pub fn cam_on_tape(tape: &mut Tape, class_weights_row: Var, activations: Var) -> Result<Var> {
    tape.weighted_sum_planes(class_weights_row, activations)
}

/// Taped twin of [`spatial_attention`]. The subtracted maximum is a constant
/// of the forward pass; by shift invariance this does not change the
/// gradient.
pub fn spatial_attention_on_tape(tape: &mut Tape, f: Var, m_c: Var) -> Result<Var> {
    let mut max = f64::NEG_INFINITY;
    for &v in tape.value(m_c).data() {
        max = math::max(max, v);
    }
    let shifted = tape.affine(m_c, 1.0, -max)?;
    let e = tape.exp(shifted)?;
    let s = tape.sum_all(e)?;
    let w = tape.div(e, s)?;
    tape.mul_spatial(f, w)
}
