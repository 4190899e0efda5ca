//! Tiny configurable backbone standing in for a large image CNN.
//!
//! Each stage is a shape-preserving 3x3 convolution, a tanh, and a 2x mean
//! downsample. The final stage's activations `a_l` feed the attention path;
//! a linear head over their spatial means produces per-frame logits. The
//! head weight matrix doubles as the CAM weights: the saliency map of a
//! class is formed from the same weights that score it.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::attention::CamWeights;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::rng::Rng;
use crate::tensor::{conv2d, Kernel2D, Tensor};

/// One convolution stage: 3x3 kernel bank plus per-channel bias.
#[derive(Debug, Clone)]
pub struct ConvStage {
    pub kernel: Kernel2D,
    pub bias: Tensor,
}

impl ConvStage {
    pub fn new(in_channels: usize, out_channels: usize, sd: f64, rng: &mut Rng) -> Result<Self> {
        Ok(ConvStage {
            kernel: Kernel2D::random(out_channels, in_channels, 3, 3, sd, rng)?,
            bias: Tensor::zeros(&[out_channels]),
        })
    }
}

pub(crate) fn bias_add(t: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 || bias.rank() != 1 || bias.shape()[0] != t.shape()[0] {
        return Err(Error::shape(
            "bias_add",
            format!("{:?} + {:?}", t.shape(), bias.shape()),
        ));
    }
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let mut out = t.clone();
    for ch in 0..c {
        let b = bias.data()[ch];
        for i in 0..hw {
            out.data_mut()[ch * hw + i] += b;
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool2(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 || t.shape()[1] % 2 != 0 || t.shape()[2] % 2 != 0 {
        return Err(Error::shape(
            "avg_pool2",
            format!("expected [C, even, even], got {:?}", t.shape()),
        ));
    }
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let (oh, ow) = (h / 2, w / 2);
    Tensor::from_fn(&[c, oh, ow], |i| {
        let base = (i[0] * h + 2 * i[1]) * w + 2 * i[2];
        (t.data()[base] + t.data()[base + 1] + t.data()[base + w] + t.data()[base + w + 1]) * 0.25
    })
}

pub(crate) fn global_avg_pool(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 3 {
        return Err(Error::shape(
            "global_avg_pool",
            format!("expected [C,H,W], got {:?}", t.shape()),
        ));
    }
    let (c, hw) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
    let mut out = Vec::with_capacity(c);
    for ch in 0..c {
        let mut s = 0.0;
        for &v in &t.data()[ch * hw..(ch + 1) * hw] {
            s += v;
        }
        out.push(s / hw as f64);
    }
    Tensor::new(alloc::vec![c], out)
}

pub(crate) fn mat_vec(w: &Tensor, x: &Tensor) -> Result<Tensor> {
    if w.rank() != 2 || x.rank() != 1 || w.shape()[1] != x.shape()[0] {
        return Err(Error::shape(
            "mat_vec",
            format!("{:?} . {:?}", w.shape(), x.shape()),
        ));
    }
    let (k, d) = (w.shape()[0], w.shape()[1]);
    let mut out = Vec::with_capacity(k);
    for row in 0..k {
        let mut s = 0.0;
        for col in 0..d {
            s += w.data()[row * d + col] * x.data()[col];
        }
        out.push(s);
    }
    Tensor::new(alloc::vec![k], out)
}

/// Small stage-based CNN with a linear classifier head whose weights also
/// serve as the CAM weights.
#[derive(Debug, Clone)]
pub struct TinyBackbone {
    pub stages: Vec<ConvStage>,
    /// `[K, L]` head weights == CAM weights.
    pub head: CamWeights,
    pub head_bias: Tensor,
}

impl TinyBackbone {
    pub fn new(
        in_channels: usize,
        stage_channels: &[usize],
        n_classes: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if stage_channels.is_empty() || n_classes == 0 {
            return Err(Error::invalid(
                "TinyBackbone::new",
                "need at least one stage and one class",
            ));
        }
        let mut stages = Vec::with_capacity(stage_channels.len());
        let mut prev = in_channels;
        for &ch in stage_channels {
            let sd = 1.0 / (9.0 * prev as f64).max(1.0);
            stages.push(ConvStage::new(prev, ch, sd, rng)?);
            prev = ch;
        }
        let units = prev;
        let head = CamWeights::new(Tensor::random_normal(
            &[n_classes, units],
            0.0,
            1.0 / (units as f64),
            rng,
        ))?;
        Ok(TinyBackbone {
            stages,
            head,
            head_bias: Tensor::zeros(&[n_classes]),
        })
    }

    /// Channel count of the final activations (`L`).
    pub fn units(&self) -> usize {
        self.head.units()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Spatial shrink factor (2 per stage).
    pub fn downsample_factor(&self) -> usize {
        1 << self.stages.len()
    }

    /// Runs the stages and the head: `(activations [L,h,w], logits [K])`.
    pub fn forward(&self, frame: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut x = frame.clone();
        for stage in &self.stages {
            let c = conv2d(&x, &stage.kernel, stage.kernel.same_pad())?;
            let t = bias_add(&c, &stage.bias)?.map(math::tanh)?;
            x = avg_pool2(&t)?;
        }
        let gap = global_avg_pool(&x)?;
        let logits = mat_vec(self.head.weights(), &gap)?.add(&self.head_bias)?;
        Ok((x, logits))
    }

    pub(crate) fn for_each_param(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(String, &Tensor),
    ) {
        for (i, stage) in self.stages.iter().enumerate() {
            f(format!("{prefix}.stage{i}.kernel"), stage.kernel.weights());
            f(format!("{prefix}.stage{i}.bias"), &stage.bias);
        }
        f(format!("{prefix}.head.weight"), self.head.weights());
        f(format!("{prefix}.head.bias"), &self.head_bias);
    }

    pub(crate) fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(String, &mut Tensor),
    ) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            f(format!("{prefix}.stage{i}.kernel"), stage.kernel.weights_mut());
            f(format!("{prefix}.stage{i}.bias"), &mut stage.bias);
        }
        f(format!("{prefix}.head.weight"), self.head.weights_mut());
        f(format!("{prefix}.head.bias"), &mut self.head_bias);
    }

    /// Taped twin of [`TinyBackbone::forward`]; `vars` follow the canonical
    /// parameter order.
    pub(crate) fn on_tape(
        &self,
        tape: &mut Tape,
        frame: Var,
        stage_vars: &[(Var, Var)],
        head_w: Var,
        head_b: Var,
    ) -> Result<(Var, Var)> {
        let mut x = frame;
        for (i, stage) in self.stages.iter().enumerate() {
            let (kv, bv) = stage_vars[i];
            let c = tape.conv2d(x, kv, stage.kernel.same_pad())?;
            let cb = tape.bias_add(c, bv)?;
            let t = tape.tanh(cb)?;
            x = tape.avg_pool2(t)?;
        }
        let gap = tape.global_avg_pool(x)?;
        let wl = tape.mat_vec(head_w, gap)?;
        let logits = tape.add(wl, head_b)?;
        Ok((x, logits))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shapes_and_downsampling() {
        let mut rng = Rng::new(1);
        let bb = TinyBackbone::new(3, &[4, 8], 5, &mut rng).unwrap();
        let frame = Tensor::random_uniform(&[3, 16, 16], 0.0, 1.0, &mut rng);
        let (acts, logits) = bb.forward(&frame).unwrap();
        assert_eq!(acts.shape(), &[8, 4, 4]);
        assert_eq!(logits.shape(), &[5]);
        assert_eq!(bb.downsample_factor(), 4);
    }

    #[test]
    fn odd_extents_are_rejected() {
        let mut rng = Rng::new(2);
        let bb = TinyBackbone::new(3, &[4], 2, &mut rng).unwrap();
        let frame = Tensor::zeros(&[3, 7, 8]);
        assert!(bb.forward(&frame).is_err());
    }

    #[test]
    fn head_is_the_cam_weight_matrix() {
        let mut rng = Rng::new(3);
        let bb = TinyBackbone::new(3, &[4], 2, &mut rng).unwrap();
        assert_eq!(bb.head.classes(), 2);
        assert_eq!(bb.head.units(), 4);
    }
}
