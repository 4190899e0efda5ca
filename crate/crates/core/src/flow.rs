//! The representation-flow layer.
//!
//! Motion between two single-channel feature maps `F1`, `F2` is estimated by
//! an unrolled TV-L1 primal–dual solver. Per iteration, with the flow `u`
//! and the dual field `p` starting from zero:
//!
//! ```text
//! rho = (F2 - F1) + gx * ux + gy * uy                  (data residual)
//! v   = u + lt*g          where rho < -lt*|g|^2        (lt = lambda*theta)
//!       u - lt*g          where rho >  lt*|g|^2
//!       u - rho*g/(|g|^2 + eps)                        otherwise
//! u   = v + theta * divergence(p)
//! p   = (p + (tau/theta) * grad(u)) / (1 + (tau/theta) * |grad(u)| + eps)
//! ```
//!
//! `g = (gx, gy)` are smoothed derivative (Sobel) responses of `F2`, computed
//! once per frame pair and held fixed across iterations; there is no warping
//! and no pyramid. Every stencil and every step size is a trainable
//! parameter. The threshold comparisons are strict, ties fall to the
//! `otherwise` branch, and the backward pass treats the branch indicators as
//! locally constant.
//!
//! Two implementations of the same arithmetic live here: a plain forward
//! ([`rep_flow`], [`tvl1_step`]) used on inference/benchmark paths, and a
//! taped forward ([`rep_flow_on_tape`]) used whenever gradients are needed.
//! Both issue the identical sequence of elementwise operations, so their
//! outputs are bit-identical (pinned by a test).

use alloc::format;

use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, Kernel2D, Tensor};

/// Which field feeds the dual-update denominator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DualDenominator {
    /// `1 + (tau/theta)*|grad(u_k)|` per flow component (the TV-L1 form).
    #[default]
    GradU,
    /// `1 + (tau/theta)*|u|`, kept for comparison.
    U,
}

/// Learnable and fixed parameters of the flow layer.
///
/// `tau` (dual step), `theta` (coupling) and `lambda` (data weight) are
/// one-element tensors so the trainer can treat them like any other
/// parameter; they must stay strictly positive. The default derivative
/// stencils are the Sobel operators oriented so that cross-correlation
/// yields the smoothed spatial derivative (response `+8` on a unit ramp).
#[derive(Debug, Clone)]
pub struct FlowParams {
    tau: Tensor,
    theta: Tensor,
    lambda: Tensor,
    pub n_iters: usize,
    pub eps: f64,
    pub dual_denominator: DualDenominator,
    sobel_x: Kernel2D,
    sobel_y: Kernel2D,
    div_wx: Kernel2D,
    div_wy: Kernel2D,
}

/// Default horizontal derivative stencil.
pub const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
/// Default vertical derivative stencil.
pub const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
/// Backward difference in x (divergence default), embedded in a 3x3 stencil.
pub const DIV_WX: [[f64; 3]; 3] = [[0.0, 0.0, 0.0], [-1.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
/// Backward difference in y (divergence default), embedded in a 3x3 stencil.
pub const DIV_WY: [[f64; 3]; 3] = [[0.0, -1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];

fn stencil(rows: &[[f64; 3]; 3]) -> Kernel2D {
    Kernel2D::from_rows(&[&rows[0], &rows[1], &rows[2]]).expect("static 3x3 stencil")
}

impl FlowParams {
    /// `tau = 0.25`, `theta = 0.3`, `lambda = 0.15`, 20 iterations,
    /// `eps = 1e-12`, derivative Sobel and backward-difference stencils.
    pub fn defaults() -> Self {
        FlowParams::new(0.25, 0.3, 0.15, 20).expect("defaults are valid")
    }

    pub fn new(tau: f64, theta: f64, lambda: f64, n_iters: usize) -> Result<Self> {
        if !(tau > 0.0) || !(theta > 0.0) || !(lambda > 0.0) {
            return Err(Error::invalid(
                "FlowParams::new",
                format!("tau, theta, lambda must be positive, got {tau}, {theta}, {lambda}"),
            ));
        }
        if n_iters == 0 {
            return Err(Error::invalid("FlowParams::new", "n_iters must be positive"));
        }
        Ok(FlowParams {
            tau: Tensor::scalar(tau),
            theta: Tensor::scalar(theta),
            lambda: Tensor::scalar(lambda),
            n_iters,
            eps: 1e-12,
            dual_denominator: DualDenominator::GradU,
            sobel_x: stencil(&SOBEL_X),
            sobel_y: stencil(&SOBEL_Y),
            div_wx: stencil(&DIV_WX),
            div_wy: stencil(&DIV_WY),
        })
    }

    pub fn with_n_iters(mut self, n_iters: usize) -> Self {
        self.n_iters = n_iters.max(1);
        self
    }

    pub fn with_dual_denominator(mut self, d: DualDenominator) -> Self {
        self.dual_denominator = d;
        self
    }

    pub fn tau(&self) -> f64 {
        self.tau.data()[0]
    }

    pub fn theta(&self) -> f64 {
        self.theta.data()[0]
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.data()[0]
    }

    pub fn sobel_x(&self) -> &Kernel2D {
        &self.sobel_x
    }

    pub fn sobel_y(&self) -> &Kernel2D {
        &self.sobel_y
    }

    pub fn div_wx(&self) -> &Kernel2D {
        &self.div_wx
    }

    pub fn div_wy(&self) -> &Kernel2D {
        &self.div_wy
    }

    /// Visits the seven trainable parameter tensors in canonical order.
    pub fn for_each_param(&self, prefix: &str, f: &mut dyn FnMut(alloc::string::String, &Tensor)) {
        f(format!("{prefix}.tau"), &self.tau);
        f(format!("{prefix}.theta"), &self.theta);
        f(format!("{prefix}.lambda"), &self.lambda);
        f(format!("{prefix}.sobel_x"), self.sobel_x.weights());
        f(format!("{prefix}.sobel_y"), self.sobel_y.weights());
        f(format!("{prefix}.div_wx"), self.div_wx.weights());
        f(format!("{prefix}.div_wy"), self.div_wy.weights());
    }

    /// Mutable variant of [`FlowParams::for_each_param`], same order.
    pub fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor),
    ) {
        f(format!("{prefix}.tau"), &mut self.tau);
        f(format!("{prefix}.theta"), &mut self.theta);
        f(format!("{prefix}.lambda"), &mut self.lambda);
        f(format!("{prefix}.sobel_x"), self.sobel_x.weights_mut());
        f(format!("{prefix}.sobel_y"), self.sobel_y.weights_mut());
        f(format!("{prefix}.div_wx"), self.div_wx.weights_mut());
        f(format!("{prefix}.div_wy"), self.div_wy.weights_mut());
    }

    /// Clamps the step-size parameters back to strictly positive values;
    /// called after optimizer updates.
    pub fn clamp_positive(&mut self, floor: f64) {
        for t in [&mut self.tau, &mut self.theta, &mut self.lambda] {
            let v = t.data()[0];
            if !(v > floor) {
                t.data_mut()[0] = floor;
            }
        }
    }

    /// Registers the trainable parameters on a tape.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> FlowParamVars {
        FlowParamVars {
            tau: tape.leaf(self.tau.clone(), trainable),
            theta: tape.leaf(self.theta.clone(), trainable),
            lambda: tape.leaf(self.lambda.clone(), trainable),
            sobel_x: tape.leaf(self.sobel_x.weights().clone(), trainable),
            sobel_y: tape.leaf(self.sobel_y.weights().clone(), trainable),
            div_wx: tape.leaf(self.div_wx.weights().clone(), trainable),
            div_wy: tape.leaf(self.div_wy.weights().clone(), trainable),
        }
    }
}

/// Tape handles for the parameters of one flow layer.
#[derive(Debug, Clone, Copy)]
pub struct FlowParamVars {
    pub tau: Var,
    pub theta: Var,
    pub lambda: Var,
    pub sobel_x: Var,
    pub sobel_y: Var,
    pub div_wx: Var,
    pub div_wy: Var,
}

/// Primal flow field `u: [2,H,W]` and dual field `p: [2,2,H,W]`
/// (per flow component, its x- and y-direction dual plane).
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub u: Tensor,
    pub p: Tensor,
}

impl FlowState {
    /// Zero initial state.
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowState {
            u: Tensor::zeros(&[2, h, w]),
            p: Tensor::zeros(&[2, 2, h, w]),
        }
    }
}

/// Smoothed derivative responses `(gx, gy)` of a single-channel map.
pub fn feature_gradients(f: &Tensor, params: &FlowParams) -> Result<(Tensor, Tensor)> {
    let [h, w] = *f.shape() else {
        return Err(Error::shape(
            "feature_gradients",
            format!("expected [H,W], got {:?}", f.shape()),
        ));
    };
    if h < 3 || w < 3 {
        return Err(Error::invalid(
            "feature_gradients",
            format!("extents {h}x{w} are degenerate (need at least 3x3)"),
        ));
    }
    let gx = conv2d(f, &params.sobel_x, params.sobel_x.same_pad())?;
    let gy = conv2d(f, &params.sobel_y, params.sobel_y.same_pad())?;
    Ok((gx, gy))
}

/// Temporal residual `F2 - F1`.
pub fn residual(f1: &Tensor, f2: &Tensor) -> Result<Tensor> {
    f2.sub(f1)
}

/// Divergence of the dual field: `div_k = p[k,0]*w_x + p[k,1]*w_y`,
/// zero-padded and shape-preserving.
pub fn divergence(p: &Tensor, params: &FlowParams) -> Result<Tensor> {
    if p.rank() != 4 || p.shape()[0] != 2 || p.shape()[1] != 2 {
        return Err(Error::shape(
            "divergence",
            format!("expected [2,2,H,W], got {:?}", p.shape()),
        ));
    }
    let mut planes = Vec::with_capacity(2);
    for k in 0..2 {
        let comp = p.index_axis0(k)?;
        let px = comp.index_axis0(0)?;
        let py = comp.index_axis0(1)?;
        let dx = conv2d(&px, &params.div_wx, params.div_wx.same_pad())?;
        let dy = conv2d(&py, &params.div_wy, params.div_wy.same_pad())?;
        planes.push(dx.add(&dy)?);
    }
    Tensor::stack(&[&planes[0], &planes[1]])
}

/// Spatial derivatives of the flow: for each component, its Sobel-x and
/// Sobel-y responses (the same stencils used for the feature gradients).
pub fn grad_u(u: &Tensor, params: &FlowParams) -> Result<Tensor> {
    if u.rank() != 3 || u.shape()[0] != 2 {
        return Err(Error::shape(
            "grad_u",
            format!("expected [2,H,W], got {:?}", u.shape()),
        ));
    }
    let mut comps = Vec::with_capacity(2);
    for k in 0..2 {
        let uk = u.index_axis0(k)?;
        let dx = conv2d(&uk, &params.sobel_x, params.sobel_x.same_pad())?;
        let dy = conv2d(&uk, &params.sobel_y, params.sobel_y.same_pad())?;
        comps.push(Tensor::stack(&[&dx, &dy])?);
    }
    Tensor::stack(&[&comps[0], &comps[1]])
}

/// Branch masks of the thresholding step: `(rho < -thr, rho > thr, otherwise)`
/// with strict comparisons; ties land in `otherwise`.
fn branch_masks(rho: &Tensor, thr: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let m1 = rho.zip(thr, |r, t| if r < -t { 1.0 } else { 0.0 })?;
    let m2 = rho.zip(thr, |r, t| if r > t { 1.0 } else { 0.0 })?;
    let m3 = m1.zip(&m2, |a, b| 1.0 - a - b)?;
    Ok((m1, m2, m3))
}

/// One full primal–dual update. `gx`, `gy`, `rho_c` are the fixed per-pair
/// fields of shape `[H,W]`; returns the advanced state.
///
/// The arithmetic here mirrors the taped implementation operation for
/// operation so both paths agree bitwise.
pub fn tvl1_step(
    state: &FlowState,
    gx: &Tensor,
    gy: &Tensor,
    rho_c: &Tensor,
    params: &FlowParams,
) -> Result<FlowState> {
    if gx.shape() != gy.shape() || gx.shape() != rho_c.shape() || gx.rank() != 2 {
        return Err(Error::shape(
            "tvl1_step",
            format!(
                "gradient/residual shapes disagree: {:?}, {:?}, {:?}",
                gx.shape(),
                gy.shape(),
                rho_c.shape()
            ),
        ));
    }
    if state.u.shape()[1..] != gx.shape()[..] {
        return Err(Error::shape(
            "tvl1_step",
            format!("state {:?} vs fields {:?}", state.u.shape(), gx.shape()),
        ));
    }

    let ux = state.u.index_axis0(0)?;
    let uy = state.u.index_axis0(1)?;
    let lt = params.lambda() * params.theta();
    let eps = params.eps;

    let g2 = gx.mul(gx)?.add(&gy.mul(gy)?)?;
    let thr = g2.map(|v| lt * v)?;
    let rho = rho_c.add(&gx.mul(&ux)?.add(&gy.mul(&uy)?)?)?;
    let (m1, m2, m3) = branch_masks(&rho, &thr)?;
    let denom3 = g2.map(|v| v + eps)?;

    let select = |u_k: &Tensor, g_k: &Tensor| -> Result<Tensor> {
        let step = g_k.map(|v| lt * v)?;
        let b1 = u_k.add(&step)?;
        let b2 = u_k.sub(&step)?;
        let b3 = u_k.sub(&rho.mul(g_k)?.zip(&denom3, |a, b| a / b)?)?;
        m1.mul(&b1)?.add(&m2.mul(&b2)?)?.add(&m3.mul(&b3)?)
    };
    let vx = select(&ux, gx)?;
    let vy = select(&uy, gy)?;

    let div = divergence(&state.p, params)?;
    let theta = params.theta();
    let new_ux = vx.add(&div.index_axis0(0)?.map(|v| theta * v)?)?;
    let new_uy = vy.add(&div.index_axis0(1)?.map(|v| theta * v)?)?;
    let new_u = Tensor::stack(&[&new_ux, &new_uy])?;

    let gu = grad_u(&new_u, params)?;
    let ratio = params.tau() / theta;
    let one_eps = 1.0 + eps;
    let u_norm = match params.dual_denominator {
        DualDenominator::GradU => None,
        DualDenominator::U => Some(new_ux.zip(&new_uy, crate::math::hypot)?),
    };

    let mut p_planes = Vec::with_capacity(2);
    for k in 0..2 {
        let guk = gu.index_axis0(k)?;
        let dx = guk.index_axis0(0)?;
        let dy = guk.index_axis0(1)?;
        let norm = match &u_norm {
            Some(n) => n.clone(),
            None => dx.zip(&dy, crate::math::hypot)?,
        };
        let den = norm.map(|n| ratio * n + one_eps)?;
        let pk = state.p.index_axis0(k)?;
        let upd = |p_old: &Tensor, g_new: &Tensor| -> Result<Tensor> {
            p_old
                .add(&g_new.map(|v| ratio * v)?)?
                .zip(&den, |a, b| a / b)
        };
        let p0 = upd(&pk.index_axis0(0)?, &dx)?;
        let p1 = upd(&pk.index_axis0(1)?, &dy)?;
        p_planes.push(Tensor::stack(&[&p0, &p1])?);
    }
    let new_p = Tensor::stack(&[&p_planes[0], &p_planes[1]])?;

    Ok(FlowState { u: new_u, p: new_p })
}

/// Runs the full unrolled solver on one frame pair, returning `u: [2,H,W]`.
pub fn rep_flow(f1: &Tensor, f2: &Tensor, params: &FlowParams) -> Result<Tensor> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape(
            "rep_flow",
            format!("{:?} vs {:?}", f1.shape(), f2.shape()),
        ));
    }
    let (gx, gy) = feature_gradients(f2, params)?;
    let rho_c = residual(f1, f2)?;
    let mut state = FlowState::zeros(f1.shape()[0], f1.shape()[1]);
    for _ in 0..params.n_iters {
        state = tvl1_step(&state, &gx, &gy, &rho_c, params)?;
    }
    Ok(state.u)
}

/// TV-L1 energy surrogate `lambda * sum|rho(u)| + sum|grad(u)|`, used to
/// watch the solver descend.
pub fn tv_energy(
    u: &Tensor,
    gx: &Tensor,
    gy: &Tensor,
    rho_c: &Tensor,
    params: &FlowParams,
) -> Result<f64> {
    let ux = u.index_axis0(0)?;
    let uy = u.index_axis0(1)?;
    let rho = rho_c.add(&gx.mul(&ux)?.add(&gy.mul(&uy)?)?)?;
    let data: f64 = rho.data().iter().map(|v| crate::math::abs(*v)).sum();
    let gu = grad_u(u, params)?;
    let mut smooth = 0.0;
    for k in 0..2 {
        let guk = gu.index_axis0(k)?;
        let dx = guk.index_axis0(0)?;
        let dy = guk.index_axis0(1)?;
        for (a, b) in dx.data().iter().zip(dy.data()) {
            smooth += crate::math::hypot(*a, *b);
        }
    }
    Ok(params.lambda() * data + smooth)
}

// ---------------------------------------------------------------------------
// Taped forward
// ---------------------------------------------------------------------------

/// Taped twin of [`rep_flow`]: unrolls the solver on `tape` and returns the
/// stacked `[2,H,W]` flow node. `f1`, `f2` are `[H,W]` nodes.
pub fn rep_flow_on_tape(
    tape: &mut Tape,
    f1: Var,
    f2: Var,
    vars: &FlowParamVars,
    params: &FlowParams,
) -> Result<Var> {
    let shape = tape.value(f1).shape().to_vec();
    if shape.len() != 2 || tape.value(f2).shape() != shape {
        return Err(Error::shape(
            "rep_flow_on_tape",
            format!("{:?} vs {:?}", shape, tape.value(f2).shape()),
        ));
    }
    if shape[0] < 3 || shape[1] < 3 {
        return Err(Error::invalid(
            "rep_flow_on_tape",
            "extents are degenerate (need at least 3x3)",
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let eps = params.eps;

    let sx_pad = params.sobel_x.same_pad();
    let sy_pad = params.sobel_y.same_pad();
    let gx = tape.conv_plane(f2, vars.sobel_x, sx_pad)?;
    let gy = tape.conv_plane(f2, vars.sobel_y, sy_pad)?;
    let rho_c = tape.sub(f2, f1)?;

    let lt = tape.mul(vars.lambda, vars.theta)?;
    let g2a = tape.mul(gx, gx)?;
    let g2b = tape.mul(gy, gy)?;
    let g2 = tape.add(g2a, g2b)?;
    let thr = tape.mul(lt, g2)?;
    let denom3 = tape.affine(g2, 1.0, eps)?;
    let ratio = tape.div(vars.tau, vars.theta)?;

    let zero = Tensor::zeros(&[h, w]);
    let mut ux = tape.constant(zero.clone());
    let mut uy = tape.constant(zero.clone());
    let mut p = [
        [tape.constant(zero.clone()), tape.constant(zero.clone())],
        [tape.constant(zero.clone()), tape.constant(zero)],
    ];

    for _ in 0..params.n_iters {
        // rho and the branch masks (masks are locally constant).
        let gxux = tape.mul(gx, ux)?;
        let gyuy = tape.mul(gy, uy)?;
        let dot = tape.add(gxux, gyuy)?;
        let rho = tape.add(rho_c, dot)?;
        let (m1t, m2t, m3t) = branch_masks(tape.value(rho), tape.value(thr))?;
        let m1 = tape.constant(m1t);
        let m2 = tape.constant(m2t);
        let m3 = tape.constant(m3t);

        let select = |tape: &mut Tape, u_k: Var, g_k: Var| -> Result<Var> {
            let step = tape.mul(lt, g_k)?;
            let b1 = tape.add(u_k, step)?;
            let b2 = tape.sub(u_k, step)?;
            let rg = tape.mul(rho, g_k)?;
            let corr = tape.div(rg, denom3)?;
            let b3 = tape.sub(u_k, corr)?;
            let s1 = tape.mul(m1, b1)?;
            let s2 = tape.mul(m2, b2)?;
            let s3 = tape.mul(m3, b3)?;
            let s12 = tape.add(s1, s2)?;
            tape.add(s12, s3)
        };
        let vx = select(tape, ux, gx)?;
        let vy = select(tape, uy, gy)?;

        // u = v + theta * divergence(p)
        let wx_pad = params.div_wx.same_pad();
        let wy_pad = params.div_wy.same_pad();
        let div_k = |tape: &mut Tape, k: usize| -> Result<Var> {
            let dx = tape.conv_plane(p[k][0], vars.div_wx, wx_pad)?;
            let dy = tape.conv_plane(p[k][1], vars.div_wy, wy_pad)?;
            tape.add(dx, dy)
        };
        let div_x = div_k(tape, 0)?;
        let div_y = div_k(tape, 1)?;
        let tdx = tape.mul(vars.theta, div_x)?;
        let tdy = tape.mul(vars.theta, div_y)?;
        ux = tape.add(vx, tdx)?;
        uy = tape.add(vy, tdy)?;

        // p = (p + ratio*grad(u)) / (1 + ratio*|grad(u)| + eps)
        let u_norm = match params.dual_denominator {
            DualDenominator::GradU => None,
            DualDenominator::U => Some(tape.hypot(ux, uy)?),
        };
        for (k, u_k) in [(0usize, ux), (1usize, uy)] {
            let dx = tape.conv_plane(u_k, vars.sobel_x, sx_pad)?;
            let dy = tape.conv_plane(u_k, vars.sobel_y, sy_pad)?;
            let norm = match u_norm {
                Some(n) => n,
                None => tape.hypot(dx, dy)?,
            };
            let rn = tape.mul(ratio, norm)?;
            let den = tape.affine(rn, 1.0, 1.0 + eps)?;
            let upd = |tape: &mut Tape, p_old: Var, g_new: Var| -> Result<Var> {
                let rg = tape.mul(ratio, g_new)?;
                let num = tape.add(p_old, rg)?;
                tape.div(num, den)
            };
            p[k][0] = upd(tape, p[k][0], dx)?;
            p[k][1] = upd(tape, p[k][1], dy)?;
        }
    }

    tape.stack_planes(&[ux, uy])
}

/// A retained forward pass of the flow layer on one frame pair; holds every
/// per-iteration intermediate needed by [`rep_flow_backward`].
pub struct FlowForward {
    tape: Tape,
    f1: Var,
    f2: Var,
    vars: FlowParamVars,
    out: Var,
}

/// Gradients of a scalar loss with respect to the flow inputs and every
/// trainable flow parameter.
#[derive(Debug, Clone)]
pub struct FlowGradients {
    pub f1: Tensor,
    pub f2: Tensor,
    pub tau: f64,
    pub theta: f64,
    pub lambda: f64,
    pub sobel_x: Tensor,
    pub sobel_y: Tensor,
    pub div_wx: Tensor,
    pub div_wy: Tensor,
}

/// Runs the flow forward with intermediates retained per iteration.
pub fn rep_flow_traced(f1: &Tensor, f2: &Tensor, params: &FlowParams) -> Result<FlowForward> {
    let mut tape = Tape::new();
    let f1v = tape.leaf(f1.clone(), true);
    let f2v = tape.leaf(f2.clone(), true);
    let vars = params.register(&mut tape, true);
    let out = rep_flow_on_tape(&mut tape, f1v, f2v, &vars, params)?;
    Ok(FlowForward {
        tape,
        f1: f1v,
        f2: f2v,
        vars,
        out,
    })
}

impl FlowForward {
    /// The flow field `[2,H,W]` produced by the forward pass.
    pub fn flow(&self) -> &Tensor {
        self.tape.value(self.out)
    }

    /// Reverse-mode gradients for an upstream adjoint of the flow output.
    pub fn backward(&self, grad_out: &Tensor) -> Result<FlowGradients> {
        let grads = self.tape.backward(self.out, grad_out.clone())?;
        let shape_of = |v: Var| self.tape.value(v).shape().to_vec();
        let dense = |v: Var| grads.get_or_zeros(v, &shape_of(v));
        let scalar = |v: Var| dense(v).data()[0];
        Ok(FlowGradients {
            f1: dense(self.f1),
            f2: dense(self.f2),
            tau: scalar(self.vars.tau),
            theta: scalar(self.vars.theta),
            lambda: scalar(self.vars.lambda),
            sobel_x: dense(self.vars.sobel_x),
            sobel_y: dense(self.vars.sobel_y),
            div_wx: dense(self.vars.div_wx),
            div_wy: dense(self.vars.div_wy),
        })
    }
}

/// Reverse-mode gradients through the unrolled solver; the branch taken in
/// the forward pass is the branch differentiated.
pub fn rep_flow_backward(forward: &FlowForward, grad_out: &Tensor) -> Result<FlowGradients> {
    forward.backward(grad_out)
}

// ---------------------------------------------------------------------------
// Channel reduce / flow / restore
// ---------------------------------------------------------------------------

/// Channel count the reference full-scale configuration reduces to before
/// running the flow; the desk profiles use smaller widths.
pub const FULL_SCALE_REDUCE_CHANNELS: usize = 32;

/// One representation-flow layer: a 1x1 channel reduction, per-channel flow
/// over consecutive frames, and a 3x3 restoration back to `out_channels`.
#[derive(Debug, Clone)]
pub struct RepFlowLayerConfig {
    pub reduce_channels: usize,
    /// `[reduce_channels, in_channels, 1, 1]`
    pub reduce_kernel: Kernel2D,
    /// `[out_channels, 2*reduce_channels, 3, 3]`
    pub restore_kernel: Kernel2D,
    pub flow_params: FlowParams,
}

impl RepFlowLayerConfig {
    /// Randomly initialised reduce/restore kernels around the given scale,
    /// default flow parameters.
    pub fn new(
        in_channels: usize,
        reduce_channels: usize,
        out_channels: usize,
        rng: &mut crate::rng::Rng,
    ) -> Result<Self> {
        if reduce_channels == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid(
                "RepFlowLayerConfig::new",
                "channel counts must be positive",
            ));
        }
        let reduce_sd = 1.0 / (in_channels as f64);
        let restore_sd = 1.0 / (2.0 * reduce_channels as f64 * 9.0).max(1.0);
        Ok(RepFlowLayerConfig {
            reduce_channels,
            reduce_kernel: Kernel2D::random(reduce_channels, in_channels, 1, 1, reduce_sd, rng)?,
            restore_kernel: Kernel2D::random(
                out_channels,
                2 * reduce_channels,
                3,
                3,
                restore_sd,
                rng,
            )?,
            flow_params: FlowParams::defaults(),
        })
    }

    pub fn in_channels(&self) -> usize {
        self.reduce_kernel.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.restore_kernel.out_channels()
    }

    /// Visits the layer's trainable tensors (reduce, restore, then the flow
    /// parameters) in canonical order.
    pub fn for_each_param(
        &self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &Tensor),
    ) {
        f(format!("{prefix}.reduce"), self.reduce_kernel.weights());
        f(format!("{prefix}.restore"), self.restore_kernel.weights());
        self.flow_params.for_each_param(prefix, f);
    }

    /// Mutable variant of [`RepFlowLayerConfig::for_each_param`], same order.
    pub fn for_each_param_mut(
        &mut self,
        prefix: &str,
        f: &mut dyn FnMut(alloc::string::String, &mut Tensor),
    ) {
        f(format!("{prefix}.reduce"), self.reduce_kernel.weights_mut());
        f(format!("{prefix}.restore"), self.restore_kernel.weights_mut());
        self.flow_params.for_each_param_mut(prefix, f);
    }
}

/// Applies the 1x1 reduction per frame, then runs the flow on every
/// consecutive frame pair and every reduced channel independently.
///
/// Output is `[T-1, 2*reduce_channels, H, W]`; for reduced channel `c`, its
/// `u_x` plane lands in output channel `2c` and its `u_y` plane in `2c + 1`.
pub fn rep_flow_layer(features: &Tensor, cfg: &RepFlowLayerConfig) -> Result<Tensor> {
    if features.rank() != 4 {
        return Err(Error::shape(
            "rep_flow_layer",
            format!("expected [T,C,H,W], got {:?}", features.shape()),
        ));
    }
    let t = features.shape()[0];
    if t < 2 {
        return Err(Error::invalid(
            "rep_flow_layer",
            format!("need at least 2 frames, got {t}"),
        ));
    }
    let reduced: Vec<Tensor> = (0..t)
        .map(|i| conv2d(&features.index_axis0(i)?, &cfg.reduce_kernel, 0))
        .collect::<Result<_>>()?;

    let mut steps = Vec::with_capacity(t - 1);
    for i in 0..t - 1 {
        let mut planes = Vec::with_capacity(2 * cfg.reduce_channels);
        for c in 0..cfg.reduce_channels {
            let u = rep_flow(
                &reduced[i].index_axis0(c)?,
                &reduced[i + 1].index_axis0(c)?,
                &cfg.flow_params,
            )?;
            planes.push(u.index_axis0(0)?);
            planes.push(u.index_axis0(1)?);
        }
        let refs: Vec<&Tensor> = planes.iter().collect();
        steps.push(Tensor::stack(&refs)?);
    }
    let refs: Vec<&Tensor> = steps.iter().collect();
    Tensor::stack(&refs)
}

/// Per-time-step 3x3 convolution restoring the configured channel count.
pub fn restore_channels(flow_features: &Tensor, cfg: &RepFlowLayerConfig) -> Result<Tensor> {
    if flow_features.rank() != 4 || flow_features.shape()[1] != 2 * cfg.reduce_channels {
        return Err(Error::shape(
            "restore_channels",
            format!(
                "expected [T,{},H,W], got {:?}",
                2 * cfg.reduce_channels,
                flow_features.shape()
            ),
        ));
    }
    let t = flow_features.shape()[0];
    let mut steps = Vec::with_capacity(t);
    for i in 0..t {
        steps.push(conv2d(
            &flow_features.index_axis0(i)?,
            &cfg.restore_kernel,
            cfg.restore_kernel.same_pad(),
        )?);
    }
    let refs: Vec<&Tensor> = steps.iter().collect();
    Tensor::stack(&refs)
}

/// Stacks two flow layers with an ordinary (shape-preserving) convolution in
/// between, re-estimating the motion of motion features. Consumes one time
/// step per flow layer: `[T,C,H,W] -> [T-2, C_out, H, W]`.
pub fn flow_of_flow(
    features: &Tensor,
    layer1: &RepFlowLayerConfig,
    mid_conv: &Kernel2D,
    layer2: &RepFlowLayerConfig,
) -> Result<Tensor> {
    if features.rank() != 4 || features.shape()[0] < 3 {
        return Err(Error::invalid(
            "flow_of_flow",
            format!("need [T>=3,C,H,W], got {:?}", features.shape()),
        ));
    }
    let first = restore_channels(&rep_flow_layer(features, layer1)?, layer1)?;
    let t = first.shape()[0];
    let mut mid = Vec::with_capacity(t);
    for i in 0..t {
        mid.push(conv2d(&first.index_axis0(i)?, mid_conv, mid_conv.same_pad())?);
    }
    let refs: Vec<&Tensor> = mid.iter().collect();
    let smoothed = Tensor::stack(&refs)?;
    restore_channels(&rep_flow_layer(&smoothed, layer2)?, layer2)
}

/// Tape handles for one flow layer's kernels and flow parameters.
#[derive(Debug, Clone, Copy)]
pub struct RepFlowLayerVars {
    pub reduce: Var,
    pub restore: Var,
    pub flow: FlowParamVars,
}

impl RepFlowLayerConfig {
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> RepFlowLayerVars {
        RepFlowLayerVars {
            reduce: tape.leaf(self.reduce_kernel.weights().clone(), trainable),
            restore: tape.leaf(self.restore_kernel.weights().clone(), trainable),
            flow: self.flow_params.register(tape, trainable),
        }
    }
}

/// Taped twin of [`rep_flow_layer`] followed by [`restore_channels`]:
/// `frames` are per-time `[C,H,W]` nodes; returns per-time `[C_out,H,W]`
/// nodes, one per consecutive frame pair.
pub fn flow_layer_on_tape(
    tape: &mut Tape,
    frames: &[Var],
    vars: &RepFlowLayerVars,
    cfg: &RepFlowLayerConfig,
) -> Result<Vec<Var>> {
    if frames.len() < 2 {
        return Err(Error::invalid(
            "flow_layer_on_tape",
            format!("need at least 2 frames, got {}", frames.len()),
        ));
    }
    let reduced: Vec<Var> = frames
        .iter()
        .map(|&f| tape.conv2d(f, vars.reduce, 0))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(frames.len() - 1);
    for i in 0..reduced.len() - 1 {
        let mut planes = Vec::with_capacity(2 * cfg.reduce_channels);
        for c in 0..cfg.reduce_channels {
            let a = tape.channel(reduced[i], c)?;
            let b = tape.channel(reduced[i + 1], c)?;
            let u = rep_flow_on_tape(tape, a, b, &vars.flow, &cfg.flow_params)?;
            planes.push(tape.channel(u, 0)?);
            planes.push(tape.channel(u, 1)?);
        }
        let stacked = tape.stack_planes(&planes)?;
        let restored = tape.conv2d(stacked, vars.restore, cfg.restore_kernel.same_pad())?;
        out.push(restored);
    }
    Ok(out)
}
