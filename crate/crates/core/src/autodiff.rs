//! Minimal reverse-mode autodiff tape.
//!
//! Forward operations evaluate eagerly, record their operands, and keep the
//! result tensor alive for the backward sweep. [`Tape::backward`] walks the
//! nodes once in reverse creation order (creation order is a topological
//! order by construction), accumulating adjoints with a fixed left-to-right
//! schedule so gradients are bit-identical across runs.
//!
//! The op set is exactly what the flow layer, the attention/ConvLSTM stack
//! and the classifier heads need — there is no general broadcasting. Binary
//! elementwise ops accept equal shapes, or a one-element tensor on either
//! side which is broadcast as a scalar (its adjoint is then the sum of the
//! elementwise adjoints).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::{conv2d, Kernel2D, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `mul * x + add`, elementwise with constant scalars; only the
    /// multiplier matters to the adjoint.
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Ln(Var),
    /// `sqrt(a^2 + b^2)` with subgradient 0 at the origin.
    Hypot(Var, Var),
    /// `max(x, c)`; the adjoint passes only where `x > c`.
    ClampMin(Var, f64),
    /// Sum of all elements -> `[1]`.
    SumAll(Var),
    /// One element by flat index -> `[1]`.
    Pick(Var, usize),
    /// Cross-correlation of a `[H,W]` plane with a single 2-D stencil stored
    /// as a `[1,1,kh,kw]` tensor.
    ConvPlane { x: Var, k: Var, pad: usize },
    /// Cross-correlation `[C,H,W] * [OC,C,kh,kw] -> [OC,H',W']`.
    Conv2d { x: Var, k: Var, pad: usize },
    /// `[C,H,W] + bias[C]`.
    BiasAdd(Var, Var),
    /// `[C,H,W] * weights[H,W]`, weights broadcast over channels.
    MulSpatial(Var, Var),
    /// `sum_l w[l] * maps[l,:,:] -> [H,W]`.
    WeightedSumPlanes(Var, Var),
    /// 2x2 mean pooling, `[C,H,W] -> [C,H/2,W/2]`.
    AvgPool2(Var),
    /// Spatial mean per channel, `[C,H,W] -> [C]`.
    GlobalAvgPool(Var),
    /// `w[K,D] . x[D] -> [K]`.
    MatVec(Var, Var),
    /// `[m] ++ [n] -> [m+n]`.
    Concat(Var, Var),
    /// Leading-axis extraction: `[C,H,W] -> [H,W]` or `[K,L] -> [L]`.
    Channel(Var, usize),
    /// Stack `[H,W]` planes into `[N,H,W]`.
    StackPlanes(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Recording tape. Values are stored per node; `backward` may be called any
/// number of times with different seeds.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Adjoint of `v`, if it participates in the differentiated subgraph.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of `v`, or zeros of the given shape when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn scalar_of(t: &Tensor) -> f64 {
    t.data()[0]
}

/// Shape rule for binary elementwise ops: equal shapes, or a one-element
/// operand broadcast against the other side.
fn elementwise_result_shape<'t>(
    op: &'static str,
    a: &'t Tensor,
    b: &'t Tensor,
) -> Result<&'t [usize]> {
    if a.shape() == b.shape() {
        Ok(a.shape())
    } else if a.len() == 1 {
        Ok(b.shape())
    } else if b.len() == 1 {
        Ok(a.shape())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn binary_forward(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = elementwise_result_shape(op, a, b)?.to_vec();
    let data: Vec<f64> = if a.shape() == b.shape() {
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
    } else if a.len() == 1 {
        let x = scalar_of(a);
        b.data().iter().map(|&y| f(x, y)).collect()
    } else {
        let y = scalar_of(b);
        a.data().iter().map(|&x| f(x, y)).collect()
    };
    Tensor::new(shape, data)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an input; gradients flow into it iff `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A non-differentiable input (masks, fixed data).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_forward("tape add", self.value(a), self.value(b), |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), v, ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_forward("tape sub", self.value(a), self.value(b), |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Sub(a, b), v, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_forward("tape mul", self.value(a), self.value(b), |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Mul(a, b), v, ng))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = binary_forward("tape div", self.value(a), self.value(b), |x, y| x / y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Div(a, b), v, ng))
    }

    /// `mul * x + add` with constant coefficients.
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Result<Var> {
        let v = self.value(x).map(|e| mul * e + add)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Affine(x, mul), v, ng))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(math::sigmoid)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Sigmoid(x), v, ng))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(math::tanh)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Tanh(x), v, ng))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(math::exp)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Exp(x), v, ng))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(math::ln)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Ln(x), v, ng))
    }

    pub fn hypot(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip(self.value(b), math::hypot)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Hypot(a, b), v, ng))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let v = self.value(x).map(|e| math::max(e, floor))?;
        let ng = self.needs(x);
        Ok(self.push(Op::ClampMin(x, floor), v, ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        if !scalar_of(&v).is_finite() {
            return Err(Error::NonFinite { op: "tape sum_all" });
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SumAll(x), v, ng))
    }

    pub fn pick(&mut self, x: Var, flat: usize) -> Result<Var> {
        let t = self.value(x);
        if flat >= t.len() {
            return Err(Error::invalid(
                "tape pick",
                format!("index {flat} out of bounds for {} elements", t.len()),
            ));
        }
        let v = Tensor::scalar(t.data()[flat]);
        let ng = self.needs(x);
        Ok(self.push(Op::Pick(x, flat), v, ng))
    }

    /// Cross-correlates a `[H,W]` plane with a single-stencil kernel node of
    /// shape `[1,1,kh,kw]`, zero-padded.
    pub fn conv_plane(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        let kt = self.value(k);
        if kt.rank() != 4 || kt.shape()[0] != 1 || kt.shape()[1] != 1 {
            return Err(Error::shape(
                "tape conv_plane",
                format!("kernel must be [1,1,kh,kw], got {:?}", kt.shape()),
            ));
        }
        if self.value(x).rank() != 2 {
            return Err(Error::shape(
                "tape conv_plane",
                format!("input must be [H,W], got {:?}", self.value(x).shape()),
            ));
        }
        let kernel = Kernel2D::new(kt.clone())?;
        let v = conv2d(self.value(x), &kernel, pad)?;
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(Op::ConvPlane { x, k, pad }, v, ng))
    }

    /// Cross-correlates `[C,H,W]` with a kernel node `[OC,C,kh,kw]`, zero-padded.
    pub fn conv2d(&mut self, x: Var, k: Var, pad: usize) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::shape(
                "tape conv2d",
                format!("input must be [C,H,W], got {:?}", self.value(x).shape()),
            ));
        }
        let kernel = Kernel2D::new(self.value(k).clone())?;
        let v = conv2d(self.value(x), &kernel, pad)?;
        let ng = self.needs(x) || self.needs(k);
        Ok(self.push(Op::Conv2d { x, k, pad }, v, ng))
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xt, bt) = (self.value(x), self.value(bias));
        if xt.rank() != 3 || bt.rank() != 1 || bt.shape()[0] != xt.shape()[0] {
            return Err(Error::shape(
                "tape bias_add",
                format!("{:?} + {:?}", xt.shape(), bt.shape()),
            ));
        }
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let mut data = Vec::with_capacity(xt.len());
        for ch in 0..c {
            let b = bt.data()[ch];
            for &v in &xt.data()[ch * h * w..(ch + 1) * h * w] {
                data.push(v + b);
            }
        }
        let v = Tensor::new(vec![c, h, w], data)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::BiasAdd(x, bias), v, ng))
    }

    /// Multiplies `[C,H,W]` features by a `[H,W]` weight plane.
    pub fn mul_spatial(&mut self, x: Var, weights: Var) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(weights));
        if xt.rank() != 3 || wt.rank() != 2 || xt.shape()[1..] != wt.shape()[..] {
            return Err(Error::shape(
                "tape mul_spatial",
                format!("{:?} * {:?}", xt.shape(), wt.shape()),
            ));
        }
        let hw = wt.len();
        let mut data = Vec::with_capacity(xt.len());
        for ch in 0..xt.shape()[0] {
            for (i, &w) in wt.data().iter().enumerate() {
                data.push(xt.data()[ch * hw + i] * w);
            }
        }
        let v = Tensor::new(xt.shape().to_vec(), data)?;
        let ng = self.needs(x) || self.needs(weights);
        Ok(self.push(Op::MulSpatial(x, weights), v, ng))
    }

    /// `sum_l w[l] * maps[l]` over the leading axis of `[L,H,W]`.
    pub fn weighted_sum_planes(&mut self, w: Var, maps: Var) -> Result<Var> {
        let (wt, mt) = (self.value(w), self.value(maps));
        if wt.rank() != 1 || mt.rank() != 3 || wt.shape()[0] != mt.shape()[0] {
            return Err(Error::shape(
                "tape weighted_sum_planes",
                format!("{:?} with {:?}", wt.shape(), mt.shape()),
            ));
        }
        let (l, h, wd) = (mt.shape()[0], mt.shape()[1], mt.shape()[2]);
        let mut data = vec![0.0f64; h * wd];
        for unit in 0..l {
            let coef = wt.data()[unit];
            for (i, out) in data.iter_mut().enumerate() {
                *out += coef * mt.data()[unit * h * wd + i];
            }
        }
        let v = Tensor::new(vec![h, wd], data)?;
        let ng = self.needs(w) || self.needs(maps);
        Ok(self.push(Op::WeightedSumPlanes(w, maps), v, ng))
    }

    /// 2x2 average pooling; spatial extents must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 || xt.shape()[1] % 2 != 0 || xt.shape()[2] % 2 != 0 {
            return Err(Error::shape(
                "tape avg_pool2",
                format!("expected [C, even, even], got {:?}", xt.shape()),
            ));
        }
        let (c, h, w) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = ch * h * w + 2 * oy * w + 2 * ox;
                    data.push(
                        (xt.data()[base]
                            + xt.data()[base + 1]
                            + xt.data()[base + w]
                            + xt.data()[base + w + 1])
                            * 0.25,
                    );
                }
            }
        }
        let v = Tensor::new(vec![c, oh, ow], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::AvgPool2(x), v, ng))
    }

    /// Spatial mean per channel.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::shape(
                "tape global_avg_pool",
                format!("expected [C,H,W], got {:?}", xt.shape()),
            ));
        }
        let (c, hw) = (xt.shape()[0], xt.shape()[1] * xt.shape()[2]);
        let mut data = Vec::with_capacity(c);
        for ch in 0..c {
            let mut s = 0.0;
            for &v in &xt.data()[ch * hw..(ch + 1) * hw] {
                s += v;
            }
            data.push(s / hw as f64);
        }
        let v = Tensor::new(vec![c], data)?;
        let ng = self.needs(x);
        Ok(self.push(Op::GlobalAvgPool(x), v, ng))
    }

    /// Matrix-vector product `w[K,D] . x[D] -> [K]`.
    pub fn mat_vec(&mut self, w: Var, x: Var) -> Result<Var> {
        let (wt, xt) = (self.value(w), self.value(x));
        if wt.rank() != 2 || xt.rank() != 1 || wt.shape()[1] != xt.shape()[0] {
            return Err(Error::shape(
                "tape mat_vec",
                format!("{:?} . {:?}", wt.shape(), xt.shape()),
            ));
        }
        let (k, d) = (wt.shape()[0], wt.shape()[1]);
        let mut data = Vec::with_capacity(k);
        for row in 0..k {
            let mut s = 0.0;
            for col in 0..d {
                s += wt.data()[row * d + col] * xt.data()[col];
            }
            data.push(s);
        }
        let v = Tensor::new(vec![k], data)?;
        let ng = self.needs(w) || self.needs(x);
        Ok(self.push(Op::MatVec(w, x), v, ng))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.rank() != 1 || bt.rank() != 1 {
            return Err(Error::shape(
                "tape concat",
                format!("{:?} ++ {:?}", at.shape(), bt.shape()),
            ));
        }
        let mut data = Vec::with_capacity(at.len() + bt.len());
        data.extend_from_slice(at.data());
        data.extend_from_slice(bt.data());
        let v = Tensor::new(vec![data.len()], data)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat(a, b), v, ng))
    }

    /// Extracts channel `c` of `[C,H,W]` as `[H,W]`.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        if self.value(x).rank() != 3 {
            return Err(Error::shape(
                "tape channel",
                format!("expected [C,H,W] input, got {:?}", self.value(x).shape()),
            ));
        }
        let v = self.value(x).index_axis0(c)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Channel(x, c), v, ng))
    }

    /// Extracts row `r` of a `[K,L]` matrix as `[L]`.
    pub fn row(&mut self, x: Var, r: usize) -> Result<Var> {
        if self.value(x).rank() != 2 {
            return Err(Error::shape(
                "tape row",
                format!("expected [K,L] input, got {:?}", self.value(x).shape()),
            ));
        }
        let v = self.value(x).index_axis0(r)?;
        let ng = self.needs(x);
        Ok(self.push(Op::Channel(x, r), v, ng))
    }

    /// Stacks `[H,W]` planes into `[N,H,W]`.
    pub fn stack_planes(&mut self, planes: &[Var]) -> Result<Var> {
        let values: Vec<&Tensor> = planes.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::stack(&values)?;
        if v.rank() != 3 {
            return Err(Error::shape("tape stack_planes", "planes must be rank 2"));
        }
        let ng = planes.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::StackPlanes(planes.to_vec()), v, ng))
    }

    /// Reverse sweep from `seed`, whose adjoint is `seed_grad` (same shape as
    /// the seed's value). Nodes that do not require gradients are skipped.
    pub fn backward(&self, seed: Var, seed_grad: Tensor) -> Result<Gradients> {
        if seed_grad.shape() != self.value(seed).shape() {
            return Err(Error::shape(
                "tape backward",
                format!(
                    "seed grad {:?} vs value {:?}",
                    seed_grad.shape(),
                    self.value(seed).shape()
                ),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[seed.0].needs_grad {
            grads[seed.0] = Some(seed_grad);
        }

        for i in (0..=seed.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        Ok(Gradients { grads })
    }

    /// Adds `delta` into the adjoint slot of `v`; a one-element operand that
    /// was broadcast receives the sum of the elementwise adjoints.
    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        let want = self.value(v).shape();
        let delta = if delta.shape() == want {
            delta
        } else if self.value(v).len() == 1 {
            Tensor::scalar(delta.sum()).reshape(want)?
        } else {
            return Err(Error::shape(
                "tape accumulate",
                format!("adjoint {:?} for value {:?}", delta.shape(), want),
            ));
        };
        match &mut grads[v.0] {
            Some(existing) => *existing = existing.add(&delta)?,
            slot @ None => *slot = Some(delta),
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.scale(-1.0)?)?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, binary_forward("tape mul bwd", g, bv, |x, y| x * y)?)?;
                self.accumulate(grads, *b, binary_forward("tape mul bwd", g, av, |x, y| x * y)?)?;
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, binary_forward("tape div bwd", g, bv, |x, y| x / y)?)?;
                let db = binary_forward("tape div bwd", av, bv, |x, y| -x / (y * y))?;
                self.accumulate(grads, *b, binary_forward("tape div bwd", g, &db, |x, y| x * y)?)?;
            }
            Op::Affine(x, mul) => {
                self.accumulate(grads, *x, g.scale(*mul)?)?;
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.accumulate(grads, *x, g.zip(y, |gi, yi| gi * yi * (1.0 - yi))?)?;
            }
            Op::Tanh(x) => {
                let y = &node.value;
                self.accumulate(grads, *x, g.zip(y, |gi, yi| gi * (1.0 - yi * yi))?)?;
            }
            Op::Exp(x) => {
                self.accumulate(grads, *x, g.mul(&node.value)?)?;
            }
            Op::Ln(x) => {
                self.accumulate(grads, *x, g.zip(self.value(*x), |gi, xi| gi / xi)?)?;
            }
            Op::Hypot(a, b) => {
                let y = &node.value;
                let da = self
                    .value(*a)
                    .zip(y, |ai, yi| if yi > 0.0 { ai / yi } else { 0.0 })?;
                let db = self
                    .value(*b)
                    .zip(y, |bi, yi| if yi > 0.0 { bi / yi } else { 0.0 })?;
                self.accumulate(grads, *a, g.mul(&da)?)?;
                self.accumulate(grads, *b, g.mul(&db)?)?;
            }
            Op::ClampMin(x, floor) => {
                let floor = *floor;
                let mask = self.value(*x).map(|v| if v > floor { 1.0 } else { 0.0 })?;
                self.accumulate(grads, *x, g.mul(&mask)?)?;
            }
            Op::SumAll(x) => {
                let gx = Tensor::filled(self.value(*x).shape(), scalar_of(g))?;
                self.accumulate(grads, *x, gx)?;
            }
            Op::Pick(x, flat) => {
                let mut gx = Tensor::zeros(self.value(*x).shape());
                gx.data_mut()[*flat] = scalar_of(g);
                self.accumulate(grads, *x, gx)?;
            }
            Op::ConvPlane { x, k, pad } | Op::Conv2d { x, k, pad } => {
                self.backprop_conv(*x, *k, *pad, g, grads)?;
            }
            Op::BiasAdd(x, bias) => {
                self.accumulate(grads, *x, g.clone())?;
                let (c, hw) = (g.shape()[0], g.shape()[1] * g.shape()[2]);
                let mut gb = Vec::with_capacity(c);
                for ch in 0..c {
                    let mut s = 0.0;
                    for &v in &g.data()[ch * hw..(ch + 1) * hw] {
                        s += v;
                    }
                    gb.push(s);
                }
                self.accumulate(grads, *bias, Tensor::new(vec![c], gb)?)?;
            }
            Op::MulSpatial(x, w) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c, hw) = (xv.shape()[0], wv.len());
                let mut gx = Vec::with_capacity(xv.len());
                for ch in 0..c {
                    for (i, &wi) in wv.data().iter().enumerate() {
                        gx.push(g.data()[ch * hw + i] * wi);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                let mut gw = vec![0.0f64; hw];
                for ch in 0..c {
                    for (i, out) in gw.iter_mut().enumerate() {
                        *out += g.data()[ch * hw + i] * xv.data()[ch * hw + i];
                    }
                }
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), gw)?)?;
            }
            Op::WeightedSumPlanes(w, maps) => {
                let (wv, mv) = (self.value(*w), self.value(*maps));
                let (l, hw) = (wv.len(), g.len());
                let mut gw = Vec::with_capacity(l);
                for unit in 0..l {
                    let mut s = 0.0;
                    for i in 0..hw {
                        s += g.data()[i] * mv.data()[unit * hw + i];
                    }
                    gw.push(s);
                }
                self.accumulate(grads, *w, Tensor::new(vec![l], gw)?)?;
                let mut gm = Vec::with_capacity(l * hw);
                for unit in 0..l {
                    let coef = wv.data()[unit];
                    for i in 0..hw {
                        gm.push(coef * g.data()[i]);
                    }
                }
                self.accumulate(grads, *maps, Tensor::new(mv.shape().to_vec(), gm)?)?;
            }
            Op::AvgPool2(x) => {
                let xv = self.value(*x);
                let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (oh, ow) = (h / 2, w / 2);
                let mut gx = vec![0.0f64; xv.len()];
                for ch in 0..c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let q = g.data()[(ch * oh + oy) * ow + ox] * 0.25;
                            let base = ch * h * w + 2 * oy * w + 2 * ox;
                            gx[base] += q;
                            gx[base + 1] += q;
                            gx[base + w] += q;
                            gx[base + w + 1] += q;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::GlobalAvgPool(x) => {
                let xv = self.value(*x);
                let (c, hw) = (xv.shape()[0], xv.shape()[1] * xv.shape()[2]);
                let mut gx = Vec::with_capacity(xv.len());
                for ch in 0..c {
                    let q = g.data()[ch] / hw as f64;
                    for _ in 0..hw {
                        gx.push(q);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.value(*w), self.value(*x));
                let (k, d) = (wv.shape()[0], wv.shape()[1]);
                let mut gw = Vec::with_capacity(k * d);
                for row in 0..k {
                    for col in 0..d {
                        gw.push(g.data()[row] * xv.data()[col]);
                    }
                }
                self.accumulate(grads, *w, Tensor::new(vec![k, d], gw)?)?;
                let mut gx = vec![0.0f64; d];
                for row in 0..k {
                    let gr = g.data()[row];
                    for (col, out) in gx.iter_mut().enumerate() {
                        *out += gr * wv.data()[row * d + col];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(vec![d], gx)?)?;
            }
            Op::Concat(a, b) => {
                let an = self.value(*a).len();
                let ga = Tensor::new(vec![an], g.data()[..an].to_vec())?;
                let gb = Tensor::new(vec![g.len() - an], g.data()[an..].to_vec())?;
                self.accumulate(grads, *a, ga)?;
                self.accumulate(grads, *b, gb)?;
            }
            Op::Channel(x, c) => {
                let xv = self.value(*x);
                let hw = g.len();
                let mut gx = vec![0.0f64; xv.len()];
                gx[c * hw..(c + 1) * hw].copy_from_slice(g.data());
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::StackPlanes(planes) => {
                for (n, &p) in planes.iter().enumerate() {
                    self.accumulate(grads, p, g.index_axis0(n)?)?;
                }
            }
        }
        Ok(())
    }

    /// Shared adjoint for plane and multi-channel cross-correlation.
    ///
    /// With `y[oc,i,j] = sum_{ic,u,v} x[ic, i+u-pad, j+v-pad] * k[oc,ic,u,v]`:
    /// `dx[ic,a,b] += sum_{oc,u,v} g[oc, a-u+pad, b-v+pad] * k[oc,ic,u,v]` and
    /// `dk[oc,ic,u,v] = sum_{i,j} g[oc,i,j] * x[ic, i+u-pad, j+v-pad]`.
    fn backprop_conv(
        &self,
        x: Var,
        k: Var,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let xv = self.value(x);
        let kv = self.value(k);
        let (c_in, h, w) = match xv.shape() {
            [h, w] => (1usize, *h, *w),
            [c, h, w] => (*c, *h, *w),
            _ => unreachable!("validated at record time"),
        };
        let (c_out, kh, kw) = (kv.shape()[0], kv.shape()[2], kv.shape()[3]);
        let (oh, ow) = (h + 2 * pad - kh + 1, w + 2 * pad - kw + 1);
        let gd = g.data();

        if self.needs(x) {
            let mut gx = vec![0.0f64; xv.len()];
            for oc in 0..c_out {
                for ic in 0..c_in {
                    let kbase = (oc * c_in + ic) * kh * kw;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gd[(oc * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = oy + ky;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = ox + kx;
                                    if ix < pad || ix >= w + pad {
                                        continue;
                                    }
                                    gx[(ic * h + (iy - pad)) * w + (ix - pad)] +=
                                        go * kv.data()[kbase + ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), gx)?)?;
        }

        if self.needs(k) {
            let mut gk = vec![0.0f64; kv.len()];
            for oc in 0..c_out {
                for ic in 0..c_in {
                    let kbase = (oc * c_in + ic) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut s = 0.0;
                            for oy in 0..oh {
                                let iy = oy + ky;
                                if iy < pad || iy >= h + pad {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = ox + kx;
                                    if ix < pad || ix >= w + pad {
                                        continue;
                                    }
                                    s += gd[(oc * oh + oy) * ow + ox]
                                        * xv.data()[(ic * h + (iy - pad)) * w + (ix - pad)];
                                }
                            }
                            gk[kbase + ky * kw + kx] = s;
                        }
                    }
                }
            }
            self.accumulate(grads, k, Tensor::new(kv.shape().to_vec(), gk)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{gradcheck, numeric_gradient};
    use crate::rng::Rng;

    /// Numeric-vs-analytic check of a scalar-valued tape program of one input.
    fn check_unary(shape: &[usize], seed: u64, build: impl Fn(&mut Tape, Var) -> Var) {
        let mut rng = Rng::new(seed);
        let x0 = Tensor::random_uniform(shape, 0.2, 1.7, &mut rng);

        let f = |t: &Tensor| -> crate::Result<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(t.clone(), true);
            let y = build(&mut tape, x);
            Ok(tape.value(y).data()[0])
        };
        let numeric = numeric_gradient(f, &x0, 1e-5).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf(x0, true);
        let y = build(&mut tape, x);
        let grads = tape.backward(y, Tensor::scalar(1.0)).unwrap();
        let analytic = grads.get(x).unwrap();

        let report = gradcheck(analytic, &numeric, 1e-6, 1e-9).unwrap();
        assert!(report.pass, "gradcheck failed: {report:?}");
    }

    #[test]
    fn elementwise_chain_gradients() {
        check_unary(&[2, 3], 1, |tape, x| {
            let s = tape.sigmoid(x).unwrap();
            let t = tape.tanh(s).unwrap();
            let e = tape.exp(t).unwrap();
            let a = tape.affine(e, 0.5, 1.0).unwrap();
            let l = tape.ln(a).unwrap();
            tape.sum_all(l).unwrap()
        });
    }

    #[test]
    fn binary_and_scalar_broadcast_gradients() {
        check_unary(&[4], 2, |tape, x| {
            let c = tape.leaf(Tensor::scalar(0.7), true);
            let p = tape.mul(x, c).unwrap();
            let q = tape.div(p, c).unwrap();
            let r = tape.add(q, x).unwrap();
            let s = tape.sub(r, c).unwrap();
            let sq = tape.mul(s, s).unwrap();
            tape.sum_all(sq).unwrap()
        });
    }

    #[test]
    fn hypot_gradient_away_from_origin() {
        check_unary(&[5], 3, |tape, x| {
            let y = tape.affine(x, 0.5, 0.3).unwrap();
            let h = tape.hypot(x, y).unwrap();
            tape.sum_all(h).unwrap()
        });
    }

    #[test]
    fn hypot_zero_origin_gives_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[3]), true);
        let b = tape.leaf(Tensor::zeros(&[3]), true);
        let h = tape.hypot(a, b).unwrap();
        let s = tape.sum_all(h).unwrap();
        let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 0.0, 0.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_plane_gradients() {
        let mut rng = Rng::new(4);
        let k0 = Tensor::random_uniform(&[1, 1, 3, 3], -0.6, 0.6, &mut rng);
        let x0 = Tensor::random_uniform(&[6, 5], -1.0, 1.0, &mut rng);

        let loss = |xv: &Tensor, kv: &Tensor, wants: (bool, bool)| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone(), wants.0);
            let k = tape.leaf(kv.clone(), wants.1);
            let y = tape.conv_plane(x, k, 1).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let s = tape.sum_all(sq).unwrap();
            (tape, x, k, s)
        };

        let numeric_x = numeric_gradient(
            |t| {
                let (tape, _, _, s) = loss(t, &k0, (false, false));
                Ok(tape.value(s).data()[0])
            },
            &x0,
            1e-5,
        )
        .unwrap();
        let numeric_k = numeric_gradient(
            |t| {
                let (tape, _, _, s) = loss(&x0, t, (false, false));
                Ok(tape.value(s).data()[0])
            },
            &k0,
            1e-5,
        )
        .unwrap();

        let (tape, x, k, s) = loss(&x0, &k0, (true, true));
        let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert!(gradcheck(grads.get(x).unwrap(), &numeric_x, 1e-6, 1e-9).unwrap().pass);
        assert!(gradcheck(grads.get(k).unwrap(), &numeric_k, 1e-6, 1e-9).unwrap().pass);
    }

    #[test]
    fn structured_op_gradients() {
        // conv2d + bias + pooling + matvec + concat + pick in one program.
        let mut rng = Rng::new(5);
        let x0 = Tensor::random_uniform(&[2, 4, 4], -1.0, 1.0, &mut rng);
        let k0 = Tensor::random_uniform(&[3, 2, 3, 3], -0.4, 0.4, &mut rng);
        let b0 = Tensor::random_uniform(&[3], -0.2, 0.2, &mut rng);
        let w0 = Tensor::random_uniform(&[2, 3], -0.8, 0.8, &mut rng);

        let run = |xv: &Tensor, kv: &Tensor, bv: &Tensor, wv: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let x = tape.leaf(xv.clone(), grad);
            let k = tape.leaf(kv.clone(), grad);
            let b = tape.leaf(bv.clone(), grad);
            let w = tape.leaf(wv.clone(), grad);
            let c = tape.conv2d(x, k, 1).unwrap();
            let cb = tape.bias_add(c, b).unwrap();
            let t = tape.tanh(cb).unwrap();
            let p = tape.avg_pool2(t).unwrap();
            let gap = tape.global_avg_pool(p).unwrap();
            let logits = tape.mat_vec(w, gap).unwrap();
            let both = tape.concat(logits, gap).unwrap();
            let picked = tape.pick(both, 1).unwrap();
            let sq = tape.mul(both, both).unwrap();
            let total = tape.sum_all(sq).unwrap();
            let loss = tape.add(total, picked).unwrap();
            (tape, [x, k, b, w], loss)
        };

        let (tape, vars, loss) = run(&x0, &k0, &b0, &w0, true);
        let grads = tape.backward(loss, Tensor::scalar(1.0)).unwrap();

        let tensors = [&x0, &k0, &b0, &w0];
        for (slot, t0) in tensors.iter().enumerate() {
            let f = |t: &Tensor| -> crate::Result<f64> {
                let mut args: Vec<Tensor> = tensors.iter().map(|t| (*t).clone()).collect();
                args[slot] = t.clone();
                let (tape, _, loss) = run(&args[0], &args[1], &args[2], &args[3], false);
                Ok(tape.value(loss).data()[0])
            };
            let numeric = numeric_gradient(f, t0, 1e-5).unwrap();
            let report = gradcheck(grads.get(vars[slot]).unwrap(), &numeric, 1e-5, 1e-8).unwrap();
            assert!(report.pass, "operand {slot}: {report:?}");
        }
    }

    #[test]
    fn attention_style_op_gradients() {
        let mut rng = Rng::new(6);
        let f0 = Tensor::random_uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let w0 = Tensor::random_uniform(&[3], -1.0, 1.0, &mut rng);

        let run = |fv: &Tensor, wv: &Tensor, grad: bool| {
            let mut tape = Tape::new();
            let f = tape.leaf(fv.clone(), grad);
            let w = tape.leaf(wv.clone(), grad);
            let cam = tape.weighted_sum_planes(w, f).unwrap();
            let att = tape.mul_spatial(f, cam).unwrap();
            let sq = tape.mul(att, att).unwrap();
            let s = tape.sum_all(sq).unwrap();
            (tape, f, w, s)
        };

        let (tape, f, w, s) = run(&f0, &w0, true);
        let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();

        let nf = numeric_gradient(
            |t| {
                let (tape, _, _, s) = run(t, &w0, false);
                Ok(tape.value(s).data()[0])
            },
            &f0,
            1e-5,
        )
        .unwrap();
        let nw = numeric_gradient(
            |t| {
                let (tape, _, _, s) = run(&f0, t, false);
                Ok(tape.value(s).data()[0])
            },
            &w0,
            1e-5,
        )
        .unwrap();

        assert!(gradcheck(grads.get(f).unwrap(), &nf, 1e-6, 1e-9).unwrap().pass);
        assert!(gradcheck(grads.get(w).unwrap(), &nw, 1e-6, 1e-9).unwrap().pass);
    }

    #[test]
    fn channel_stack_round_trip_gradient_is_identity() {
        let mut rng = Rng::new(7);
        let x0 = Tensor::random_uniform(&[3, 2, 2], -1.0, 1.0, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0, true);
        let c0 = tape.channel(x, 0).unwrap();
        let c1 = tape.channel(x, 1).unwrap();
        let c2 = tape.channel(x, 2).unwrap();
        let y = tape.stack_planes(&[c0, c1, c2]).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn clamp_min_blocks_gradient_below_floor() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![0.5, -0.5]).unwrap(), true);
        let y = tape.clamp_min(x, 0.0).unwrap();
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0]);
    }
}
