//! Convolutional LSTM for temporal aggregation.
//!
//! Gates are shape-preserving 3x3 convolutions over the input and the hidden
//! state plus a per-channel bias:
//!
//! ```text
//! I_t = sigmoid(w_x^i * f + w_h^i * h_{t-1} + b^i)
//! f_t = sigmoid(w_x^f * f + w_h^f * h_{t-1} + b^f)
//! c~  = tanh   (w_x^c * f + w_h^c * h_{t-1} + b^c)
//! O_t = sigmoid(w_x^o * f + w_h^o * h_{t-1} + b^o)
//! h_t = O_t . tanh(C_t)
//! ```
//!
//! Two cell updates are available. [`CellVariant::Standard`] is the usual
//! `C_t = I_t . c~ + f_t . C_{t-1}`. [`CellVariant::RawInput`] is the
//! alternative `C_t = c~ . f + C_{t-1} . f_t`, which multiplies the
//! candidate by the raw input features instead of the input gate and
//! therefore requires the input to have the same channel count as the
//! hidden state. The default is `Standard`; both are kept testable.

use alloc::format;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{conv2d, Kernel2D, Tensor};

/// Hidden width used by the reference full-scale configuration; the desk
/// profiles are far narrower.
pub const FULL_SCALE_HIDDEN_CHANNELS: usize = 512;

/// Cell-update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CellVariant {
    #[default]
    Standard,
    /// Candidate scaled by the raw input features rather than the input gate.
    RawInput,
}

/// Kernels and bias of one gate.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// `[hidden, in_channels, 3, 3]`
    pub w_x: Kernel2D,
    /// `[hidden, hidden, 3, 3]`
    pub w_h: Kernel2D,
    /// `[hidden]`
    pub bias: Tensor,
}

/// The four gates plus the hidden width.
#[derive(Debug, Clone)]
pub struct ConvLstmParams {
    pub input: GateParams,
    pub forget: GateParams,
    pub cell: GateParams,
    pub output: GateParams,
    pub hidden_channels: usize,
    pub in_channels: usize,
}

impl ConvLstmParams {
    /// Random 3x3 gate kernels at a scale that keeps early activations in
    /// the responsive range of the gate nonlinearities.
    pub fn new(in_channels: usize, hidden_channels: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        if in_channels == 0 || hidden_channels == 0 {
            return Err(Error::invalid(
                "ConvLstmParams::new",
                "channel counts must be positive",
            ));
        }
        let sd_x = 1.0 / (9.0 * in_channels as f64);
        let sd_h = 1.0 / (9.0 * hidden_channels as f64);
        let gate = |rng: &mut crate::rng::Rng| -> Result<GateParams> {
            Ok(GateParams {
                w_x: Kernel2D::random(hidden_channels, in_channels, 3, 3, sd_x, rng)?,
                w_h: Kernel2D::random(hidden_channels, hidden_channels, 3, 3, sd_h, rng)?,
                bias: Tensor::zeros(&[hidden_channels]),
            })
        };
        Ok(ConvLstmParams {
            input: gate(rng)?,
            forget: gate(rng)?,
            cell: gate(rng)?,
            output: gate(rng)?,
            hidden_channels,
            in_channels,
        })
    }

    fn gates(&self) -> [(&'static str, &GateParams); 4] {
        [
            ("input", &self.input),
            ("forget", &self.forget),
            ("cell", &self.cell),
            ("output", &self.output),
        ]
    }

    fn gates_mut(&mut self) -> [(&'static str, &mut GateParams); 4] {
        [
            ("input", &mut self.input),
            ("forget", &mut self.forget),
            ("cell", &mut self.cell),
            ("output", &mut self.output),
        ]
    }

    /// Visits the twelve parameter tensors in canonical order.
    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Tensor)) {
        for (name, gate) in self.gates() {
            f(format!("{prefix}.{name}.wx"), gate.w_x.weights());
            f(format!("{prefix}.{name}.wh"), gate.w_h.weights());
            f(format!("{prefix}.{name}.bias"), &gate.bias);
        }
    }

    /// Mutable variant of [`ConvLstmParams::for_each_param`], same order.
    pub fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor),
    ) {
        for (name, gate) in self.gates_mut() {
            f(format!("{prefix}.{name}.wx"), gate.w_x.weights_mut());
            f(format!("{prefix}.{name}.wh"), gate.w_h.weights_mut());
            f(format!("{prefix}.{name}.bias"), &mut gate.bias);
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ConvLstmVars {
        let mut reg = |g: &GateParams| GateVars {
            w_x: tape.leaf(g.w_x.weights().clone(), trainable),
            w_h: tape.leaf(g.w_h.weights().clone(), trainable),
            bias: tape.leaf(g.bias.clone(), trainable),
        };
        ConvLstmVars {
            input: reg(&self.input),
            forget: reg(&self.forget),
            cell: reg(&self.cell),
            output: reg(&self.output),
        }
    }
}

/// Recurrent state: hidden map `h` and cell map `c`, both `[hidden,H,W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl ConvLstmState {
    pub fn zeros(hidden: usize, h: usize, w: usize) -> Self {
        ConvLstmState {
            h: Tensor::zeros(&[hidden, h, w]),
            c: Tensor::zeros(&[hidden, h, w]),
        }
    }
}

fn bias_add_plain(t: &Tensor, bias: &Tensor) -> Result<Tensor> {
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

fn gate_plain(
    f: &Tensor,
    h: &Tensor,
    gate: &GateParams,
    squash: impl Fn(f64) -> f64,
) -> Result<Tensor> {
    let fx = conv2d(f, &gate.w_x, gate.w_x.same_pad())?;
    let hh = conv2d(h, &gate.w_h, gate.w_h.same_pad())?;
    bias_add_plain(&fx.add(&hh)?, &gate.bias)?.map(squash)
}

/// One ConvLSTM update.
pub fn convlstm_step(
    f_sa: &Tensor,
    state: &ConvLstmState,
    params: &ConvLstmParams,
    variant: CellVariant,
) -> Result<ConvLstmState> {
    if f_sa.rank() != 3 || f_sa.shape()[0] != params.in_channels {
        return Err(Error::shape(
            "convlstm_step",
            format!(
                "expected [{},H,W] input, got {:?}",
                params.in_channels,
                f_sa.shape()
            ),
        ));
    }
    if variant == CellVariant::RawInput && params.in_channels != params.hidden_channels {
        return Err(Error::shape(
            "convlstm_step",
            format!(
                "raw-input cell update needs input channels == hidden channels ({} != {})",
                params.in_channels, params.hidden_channels
            ),
        ));
    }

    let i_t = gate_plain(f_sa, &state.h, &params.input, math::sigmoid)?;
    let f_t = gate_plain(f_sa, &state.h, &params.forget, math::sigmoid)?;
    let c_cand = gate_plain(f_sa, &state.h, &params.cell, math::tanh)?;
    let o_t = gate_plain(f_sa, &state.h, &params.output, math::sigmoid)?;

    let c = match variant {
        CellVariant::Standard => i_t.mul(&c_cand)?.add(&f_t.mul(&state.c)?)?,
        CellVariant::RawInput => c_cand.mul(f_sa)?.add(&state.c.mul(&f_t)?)?,
    };
    let h = o_t.mul(&c.map(math::tanh)?)?;
    Ok(ConvLstmState { h, c })
}

/// Folds [`convlstm_step`] over the time axis of `[T,C,H,W]` from the zero
/// state and returns the final state.
pub fn convlstm_sequence(
    features: &Tensor,
    params: &ConvLstmParams,
    variant: CellVariant,
) -> Result<ConvLstmState> {
    if features.rank() != 4 || features.shape()[0] == 0 {
        return Err(Error::invalid(
            "convlstm_sequence",
            format!("expected [T>=1,C,H,W], got {:?}", features.shape()),
        ));
    }
    let (h, w) = (features.shape()[2], features.shape()[3]);
    let mut state = ConvLstmState::zeros(params.hidden_channels, h, w);
    for t in 0..features.shape()[0] {
        state = convlstm_step(&features.index_axis0(t)?, &state, params, variant)?;
    }
    Ok(state)
}

/// Tape handles for one gate.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// Tape handles for all four gates.
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmVars {
    pub input: GateVars,
    pub forget: GateVars,
    pub cell: GateVars,
    pub output: GateVars,
}

/// Taped state (`h`, `c` nodes).
#[derive(Debug, Clone, Copy)]
pub struct ConvLstmStateVars {
    pub h: Var,
    pub c: Var,
}

fn gate_on_tape(
    tape: &mut Tape,
    f: Var,
    h: Var,
    gate: &GateVars,
    pad: usize,
    sigmoid: bool,
) -> Result<Var> {
    let fx = tape.conv2d(f, gate.w_x, pad)?;
    let hh = tape.conv2d(h, gate.w_h, pad)?;
    let s = tape.add(fx, hh)?;
    let sb = tape.bias_add(s, gate.bias)?;
    if sigmoid {
        tape.sigmoid(sb)
    } else {
        tape.tanh(sb)
    }
}

/// Taped twin of [`convlstm_step`].
pub fn convlstm_step_on_tape(
    tape: &mut Tape,
    f_sa: Var,
    state: ConvLstmStateVars,
    vars: &ConvLstmVars,
    params: &ConvLstmParams,
    variant: CellVariant,
) -> Result<ConvLstmStateVars> {
    if variant == CellVariant::RawInput && params.in_channels != params.hidden_channels {
        return Err(Error::shape(
            "convlstm_step_on_tape",
            "raw-input cell update needs input channels == hidden channels",
        ));
    }
    let pad = params.input.w_x.same_pad();
    let i_t = gate_on_tape(tape, f_sa, state.h, &vars.input, pad, true)?;
    let f_t = gate_on_tape(tape, f_sa, state.h, &vars.forget, pad, true)?;
    let c_cand = gate_on_tape(tape, f_sa, state.h, &vars.cell, pad, false)?;
    let o_t = gate_on_tape(tape, f_sa, state.h, &vars.output, pad, true)?;

    let c = match variant {
        CellVariant::Standard => {
            let ic = tape.mul(i_t, c_cand)?;
            let fc = tape.mul(f_t, state.c)?;
            tape.add(ic, fc)?
        }
        CellVariant::RawInput => {
            let cf = tape.mul(c_cand, f_sa)?;
            let pf = tape.mul(state.c, f_t)?;
            tape.add(cf, pf)?
        }
    };
    let tc = tape.tanh(c)?;
    let h = tape.mul(o_t, tc)?;
    Ok(ConvLstmStateVars { h, c })
}

/// Taped twin of [`convlstm_sequence`]; `frames` are per-time `[C,H,W]` nodes.
pub fn convlstm_sequence_on_tape(
    tape: &mut Tape,
    frames: &[Var],
    vars: &ConvLstmVars,
    params: &ConvLstmParams,
    variant: CellVariant,
) -> Result<ConvLstmStateVars> {
    let first = frames
        .first()
        .ok_or_else(|| Error::invalid("convlstm_sequence_on_tape", "empty sequence"))?;
    let (h, w) = (tape.value(*first).shape()[1], tape.value(*first).shape()[2]);
    let zero = Tensor::zeros(&[params.hidden_channels, h, w]);
    let mut state = ConvLstmStateVars {
        h: tape.constant(zero.clone()),
        c: tape.constant(zero),
    };
    for &f in frames {
        state = convlstm_step_on_tape(tape, f, state, vars, params, variant)?;
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn zero_params(in_ch: usize, hidden: usize) -> ConvLstmParams {
        let zero_gate = || GateParams {
            w_x: Kernel2D::new(Tensor::zeros(&[hidden, in_ch, 3, 3])).unwrap(),
            w_h: Kernel2D::new(Tensor::zeros(&[hidden, hidden, 3, 3])).unwrap(),
            bias: Tensor::zeros(&[hidden]),
        };
        ConvLstmParams {
            input: zero_gate(),
            forget: zero_gate(),
            cell: zero_gate(),
            output: zero_gate(),
            hidden_channels: hidden,
            in_channels: in_ch,
        }
    }

    #[test]
    fn zero_parameters_give_half_gates_and_zero_state() {
        let mut rng = Rng::new(1);
        for variant in [CellVariant::Standard, CellVariant::RawInput] {
            let params = zero_params(2, 2);
            let f = Tensor::random_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
            let state = ConvLstmState::zeros(2, 4, 4);
            // All gate pre-activations are zero: sigmoid 0.5, tanh 0; the
            // candidate is zero, so the cell and hidden maps stay zero.
            let i_t = gate_plain(&f, &state.h, &params.input, math::sigmoid).unwrap();
            assert!(i_t.data().iter().all(|&v| v == 0.5));
            let next = convlstm_step(&f, &state, &params, variant).unwrap();
            assert!(next.c.data().iter().all(|&v| v == 0.0), "{variant:?}");
            assert!(next.h.data().iter().all(|&v| v == 0.0), "{variant:?}");
        }
    }

    // A strongly positive forget bias saturates f_t toward 1; with zero
    // kernels everywhere the cell state is carried through unchanged up to
    // the sigmoid's distance from 1 (about 9e-14 at bias 30).
    #[test]
    fn saturated_forget_gate_preserves_cell_state() {
        let mut rng = Rng::new(2);
        let mut params = zero_params(2, 2);
        params.forget.bias = Tensor::filled(&[2], 30.0).unwrap();
        let f = Tensor::random_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let prev_c = Tensor::random_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let state = ConvLstmState {
            h: Tensor::zeros(&[2, 4, 4]),
            c: prev_c.clone(),
        };
        let next = convlstm_step(&f, &state, &params, CellVariant::Standard).unwrap();
        for (a, b) in next.c.data().iter().zip(prev_c.data()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn raw_input_variant_requires_matching_channels() {
        let mut rng = Rng::new(3);
        let params = ConvLstmParams::new(3, 4, &mut rng).unwrap();
        let f = Tensor::random_uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let state = ConvLstmState::zeros(4, 4, 4);
        assert!(convlstm_step(&f, &state, &params, CellVariant::RawInput).is_err());
        assert!(convlstm_step(&f, &state, &params, CellVariant::Standard).is_ok());
    }

    #[test]
    fn sequence_of_one_step_equals_single_step() {
        let mut rng = Rng::new(4);
        let params = ConvLstmParams::new(2, 3, &mut rng).unwrap();
        let f = Tensor::random_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let clip = Tensor::stack(&[&f]).unwrap();
        let from_seq = convlstm_sequence(&clip, &params, CellVariant::Standard).unwrap();
        let from_step = convlstm_step(
            &f,
            &ConvLstmState::zeros(3, 4, 4),
            &params,
            CellVariant::Standard,
        )
        .unwrap();
        assert_eq!(from_seq, from_step);
    }

    #[test]
    fn zero_inputs_and_parameters_give_zero_final_state() {
        let params = zero_params(2, 2);
        let clip = Tensor::zeros(&[3, 2, 4, 4]);
        let state = convlstm_sequence(&clip, &params, CellVariant::Standard).unwrap();
        assert!(state.h.data().iter().all(|&v| v == 0.0));
        assert!(state.c.data().iter().all(|&v| v == 0.0));
        assert!(convlstm_sequence(&Tensor::zeros(&[0, 2, 4, 4]), &params, CellVariant::Standard)
            .is_err());
    }

    #[test]
    fn hidden_state_is_strictly_inside_unit_box() {
        let mut rng = Rng::new(5);
        let params = ConvLstmParams::new(2, 3, &mut rng).unwrap();
        let clip = Tensor::random_uniform(&[4, 2, 5, 5], -3.0, 3.0, &mut rng);
        let state = convlstm_sequence(&clip, &params, CellVariant::Standard).unwrap();
        assert!(state.h.data().iter().all(|&v| v.abs() < 1.0));
    }

    #[test]
    fn taped_sequence_matches_plain() {
        let mut rng = Rng::new(6);
        for variant in [CellVariant::Standard, CellVariant::RawInput] {
            let params = ConvLstmParams::new(3, 3, &mut rng).unwrap();
            let clip = Tensor::random_uniform(&[3, 3, 4, 4], -1.0, 1.0, &mut rng);
            let plain = convlstm_sequence(&clip, &params, variant).unwrap();

            let mut tape = Tape::new();
            let frames: alloc::vec::Vec<Var> = (0..3)
                .map(|t| tape.leaf(clip.index_axis0(t).unwrap(), false))
                .collect();
            let vars = params.register(&mut tape, true);
            let state =
                convlstm_sequence_on_tape(&mut tape, &frames, &vars, &params, variant).unwrap();
            assert_eq!(*tape.value(state.h), plain.h);
            assert_eq!(*tape.value(state.c), plain.c);
        }
    }
}
