use super::kernels::{self, Bcast, MatmulPlan};
use super::{numel, Tensor};
use crate::error::{Result, StumError};
use crate::params::{ParamId, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    /// Elementwise (Hadamard) product.
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    AbsMean,
}

/// Divisor used by RMS normalization.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    /// x / sqrt(mean(x²) + eps)
    #[default]
    Rms,
    /// x / (mean(x²) + eps), without the square root.
    MeanSquare,
}

enum Op {
    Leaf(Option<ParamId>),
    MatMul {
        a: Var,
        b: Var,
        plan: MatmulPlan,
    },
    Binary {
        op: BinaryOp,
        a: Var,
        b: Var,
        ma: Bcast,
        mb: Bcast,
    },
    Affine {
        x: Var,
        mul: f64,
    },
    Act {
        kind: Activation,
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    RmsNorm {
        x: Var,
        w: Var,
        variant: NormVariant,
        divisors: Vec<f64>,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    AxisMix {
        x: Var,
        m: Var,
        bias: Option<Var>,
        axis: usize,
    },
    Lerp {
        prev: Option<Var>,
        next: Var,
        gate: Var,
        map: Bcast,
    },
    MixUpdate {
        x: Var,
        prev: Option<Var>,
        m: Var,
        bias: Option<Var>,
        gate: Option<Var>,
        axis: usize,
        relu: bool,
        /// `act(mix(x + prev))`, kept only when it differs from the output.
        fresh: Option<Tensor>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records operations in execution order, which is a topological order of
/// the computation graph. [`Tape::backward`] walks it once in reverse.
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape on which parameters are recorded as constants.
    pub fn inference() -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push(value, Op::Leaf(None), rg)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf(None), false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        let rg = p.requires_grad() && self.grad_enabled;
        self.push(p.value().clone(), Op::Leaf(Some(id)), rg)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter leaves paired with their gradients after backward.
    pub(crate) fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| match (&n.op, g) {
                (Op::Leaf(Some(id)), Some(g)) => Some((*id, g)),
                _ => None,
            })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let out = kernels::matmul(&plan, self.value(a).data(), self.value(b).data());
        let value = Tensor::from_parts(plan.out_shape.clone(), out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul { a, b, plan }, rg))
    }

    /// Broadcasting elementwise binary operation.
    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let out_shape = kernels::broadcast_shape(name, self.shape(a), self.shape(b))?;
        let ma = Bcast::new(&out_shape, self.shape(a));
        let mb = Bcast::new(&out_shape, self.shape(b));
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let n = numel(&out_shape);
        let data = match op {
            BinaryOp::Add => kernels::bcast_zip(n, av, &ma, bv, &mb, |x, y| x + y),
            BinaryOp::Sub => kernels::bcast_zip(n, av, &ma, bv, &mb, |x, y| x - y),
            BinaryOp::Mul => kernels::bcast_zip(n, av, &ma, bv, &mb, |x, y| x * y),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(out_shape, data), Op::Binary { op, a, b, ma, mb }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// y = mul · x + add
    pub fn affine(&mut self, x: Var, mul: f64, add: f64) -> Var {
        let value = self.value(x).map(|v| mul * v + add);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, mul }, rg)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(StumError::NonFiniteInput(match kind {
                Activation::Relu => "relu",
                _ => "sigmoid",
            }));
        }
        let value = match kind {
            Activation::Relu => xv.map(|v| v.max(0.0)),
            _ => xv.map(sigmoid),
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Act { kind, x }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        kernels::check_axis(axis, xv.rank())?;
        if !xv.all_finite() {
            return Err(StumError::NonFiniteInput("softmax"));
        }
        let parts = kernels::split_axis(xv.shape(), axis);
        let value = Tensor::from_parts(xv.shape().to_vec(), kernels::softmax(xv.data(), parts));
        let rg = self.rg(x);
        Ok(self.push(value, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes along the last axis and multiplies by `weight`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64, variant: NormVariant) -> Result<Var> {
        let xv = self.value(x);
        let wv = self.value(weight);
        let d = *xv.shape().last().unwrap_or(&1);
        if xv.rank() == 0 || wv.shape() != [d] {
            return Err(StumError::shape("rms_norm", xv.shape(), wv.shape()));
        }
        let divisors = kernels::rms_divisors(xv.data(), d, eps, variant == NormVariant::Rms);
        let w = wv.data();
        let mut out = Vec::with_capacity(xv.len());
        for (row, &div) in xv.data().chunks_exact(d).zip(&divisors) {
            // x / 0 only arises for an all-zero row with eps = 0.
            let inv = if div > 0.0 { 1.0 / div } else { 0.0 };
            out.extend(row.iter().zip(w).map(|(v, wi)| v * inv * wi));
        }
        let value = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(weight);
        Ok(self.push(
            value,
            Op::RmsNorm {
                x,
                w: weight,
                variant,
                divisors,
            },
            rg,
        ))
    }

    /// Reduction over one axis (removed from the shape) or over everything
    /// (scalar result).
    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = self.value(x);
        let f = |v: f64| if kind == ReduceKind::AbsMean { v.abs() } else { v };
        let value = match axis {
            None => {
                let s: f64 = xv.data().iter().map(|&v| f(v)).sum();
                let s = if kind == ReduceKind::Sum {
                    s
                } else {
                    s / xv.len() as f64
                };
                Tensor::scalar(s)
            }
            Some(axis) => {
                kernels::check_axis(axis, xv.rank())?;
                let (outer, len, inner) = kernels::split_axis(xv.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let data = xv.data();
                for o in 0..outer {
                    for k in 0..len {
                        let src = &data[(o * len + k) * inner..(o * len + k + 1) * inner];
                        for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *dst += f(v);
                        }
                    }
                }
                if kind != ReduceKind::Sum {
                    out.iter_mut().for_each(|v| *v /= len as f64);
                }
                let mut shape = xv.shape().to_vec();
                shape.remove(axis);
                Tensor::from_parts(shape, out)
            }
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reduce { kind, x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Sum, x, None).expect("full reduction")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::Mean, x, None).expect("full reduction")
    }

    pub fn abs_mean(&mut self, x: Var) -> Var {
        self.reduce(ReduceKind::AbsMean, x, None).expect("full reduction")
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(StumError::AxisOutOfRange { axis: 1, rank });
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Applies the matrix `m` (`[len_in, len_out]`) along `axis` of `x`:
    /// `out[.., j, ..] = Σ_k x[.., k, ..] · m[k, j] + bias[j]`.
    pub fn axis_mix(&mut self, x: Var, m: Var, bias: Option<Var>, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        kernels::check_axis(axis, xs.len())?;
        let ms = self.shape(m);
        if ms.len() != 2 || ms[0] != xs[axis] {
            return Err(StumError::shape("axis_mix", &xs, ms));
        }
        let len_out = ms[1];
        if let Some(b) = bias {
            if self.shape(b) != [len_out] {
                return Err(StumError::shape("axis_mix bias", &[len_out], self.shape(b)));
            }
        }
        let parts = kernels::split_axis(&xs, axis);
        let out = kernels::axis_mix(
            self.value(x).data(),
            self.value(m).data(),
            bias.map(|b| self.value(b).data()),
            parts,
            len_out,
        );
        let mut shape = xs;
        shape[axis] = len_out;
        let rg = self.rg(x) || self.rg(m) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(shape, out), Op::AxisMix { x, m, bias, axis }, rg))
    }

    /// Fused recurrent mixing update along `axis`:
    /// `(1 − g)·prev + g·act(mix(x + prev))` with a scalar gate `g`, or just
    /// `act(mix(x + prev))` without one. Numerically equivalent to composing
    /// `add`, `axis_mix`, `activation` and `lerp`, without materializing the
    /// intermediates.
    #[allow(clippy::too_many_arguments)]
    pub fn mix_update(
        &mut self,
        x: Var,
        prev: Option<Var>,
        m: Var,
        bias: Option<Var>,
        gate: Option<Var>,
        axis: usize,
        act: Activation,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        kernels::check_axis(axis, xs.len())?;
        let len = xs[axis];
        if self.shape(m) != [len, len] {
            return Err(StumError::shape("mix_update", &xs, self.shape(m)));
        }
        if let Some(p) = prev {
            if self.shape(p) != xs.as_slice() {
                return Err(StumError::shape("mix_update prev", &xs, self.shape(p)));
            }
        }
        if let Some(b) = bias {
            if self.shape(b) != [len] {
                return Err(StumError::shape("mix_update bias", &[len], self.shape(b)));
            }
        }
        if let Some(g) = gate {
            if self.value(g).len() != 1 {
                return Err(StumError::shape("mix_update gate", &[1], self.shape(g)));
            }
        }
        let relu = match act {
            Activation::Identity => false,
            Activation::Relu => true,
            Activation::Sigmoid => return Err(StumError::Config("mix_update supports identity and relu".into())),
        };
        let kernel = kernels::MixUpdate {
            m: self.value(m).data(),
            bias: bias.map(|b| self.value(b).data()),
            gate: gate.map(|g| self.value(g).data()[0]),
            relu,
            parts: kernels::split_axis(&xs, axis),
        };
        let (fresh, out) = kernel.forward(self.value(x).data(), prev.map(|p| self.value(p).data()));
        let (value, fresh) = match out {
            Some(out) => (out, Some(Tensor::from_parts(xs.clone(), fresh))),
            None => (fresh, None),
        };
        let rg = [Some(x), prev, Some(m), bias, gate]
            .into_iter()
            .flatten()
            .any(|v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(xs, value),
            Op::MixUpdate {
                x,
                prev,
                m,
                bias,
                gate,
                axis,
                relu,
                fresh,
            },
            rg,
        ))
    }

    /// `(1 − g) · prev + g · next` with `g` a scalar or trailing-axis gate.
    /// A missing `prev` is treated as zeros.
    pub fn lerp(&mut self, prev: Option<Var>, next: Var, gate: Var) -> Result<Var> {
        let shape = self.shape(next).to_vec();
        if let Some(p) = prev {
            if self.shape(p) != shape.as_slice() {
                return Err(StumError::shape("lerp", self.shape(p), &shape));
            }
        }
        let map = Bcast::new(&shape, self.shape(gate));
        if matches!(map, Bcast::Map(_)) {
            return Err(StumError::shape("lerp gate", &shape, self.shape(gate)));
        }
        let data = kernels::lerp(
            prev.map(|p| self.value(p).data()),
            self.value(next).data(),
            self.value(gate).data(),
        );
        let rg = self.rg(next) || self.rg(gate) || prev.is_some_and(|p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Lerp { prev, next, gate, map }, rg))
    }

    /// Populates gradients of `loss` with respect to every reachable leaf
    /// that requires them. Intermediate gradients are released as soon as
    /// they have been propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(StumError::NotScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut pool = Vec::new();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf(_) = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
                pool: &mut pool,
            };
            self.propagate(i, &g, &mut sink);
            sink.recycle(g.into_data());
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, sink: &mut GradSink<'_>) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let gd = g.data();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf(_) => {}
            Op::MatMul { a, b, plan } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                sink.acc(*a, |ga| kernels::matmul_backward(plan, av, bv, gd, Some(ga), None));
                sink.acc(*b, |gb| kernels::matmul_backward(plan, av, bv, gd, None, Some(gb)));
            }
            Op::Binary { op, a, b, ma, mb } => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                sink.acc(*a, |ga| match op {
                    BinaryOp::Add | BinaryOp::Sub => kernels::bcast_acc(ga, ma, gd, 1.0),
                    BinaryOp::Mul => kernels::bcast_mul_acc(ga, ma, gd, bv, mb),
                });
                sink.acc(*b, |gb| match op {
                    BinaryOp::Add => kernels::bcast_acc(gb, mb, gd, 1.0),
                    BinaryOp::Sub => kernels::bcast_acc(gb, mb, gd, -1.0),
                    BinaryOp::Mul => kernels::bcast_mul_acc(gb, mb, gd, av, ma),
                });
            }
            Op::Affine { x, mul } => sink.acc(*x, |gx| {
                gx.iter_mut().zip(gd).for_each(|(a, &gk)| *a += mul * gk);
            }),
            Op::Act { kind, x } => {
                let xv = val(*x).data();
                let y = out.data();
                sink.acc(*x, |gx| match kind {
                    Activation::Relu => {
                        for k in 0..gx.len() {
                            if xv[k] > 0.0 {
                                gx[k] += gd[k];
                            }
                        }
                    }
                    _ => {
                        for k in 0..gx.len() {
                            gx[k] += gd[k] * y[k] * (1.0 - y[k]);
                        }
                    }
                });
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = kernels::split_axis(out.shape(), *axis);
                let y = out.data();
                sink.acc(*x, |gx| {
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |k: usize| o * len * inner + k * inner + j;
                            let s: f64 = (0..len).map(|k| gd[at(k)] * y[at(k)]).sum();
                            for k in 0..len {
                                gx[at(k)] += y[at(k)] * (gd[at(k)] - s);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm {
                x,
                w,
                variant,
                divisors,
            } => {
                let xv = val(*x).data();
                let wv = val(*w).data();
                let d = wv.len();
                sink.acc(*x, |gx| {
                    for (r, &div) in divisors.iter().enumerate() {
                        if div <= 0.0 {
                            continue;
                        }
                        let xs = &xv[r * d..(r + 1) * d];
                        let gs = &gd[r * d..(r + 1) * d];
                        let s: f64 = (0..d).map(|k| gs[k] * wv[k] * xs[k]).sum();
                        let coef = match variant {
                            NormVariant::Rms => s / (d as f64 * div * div * div),
                            NormVariant::MeanSquare => 2.0 * s / (d as f64 * div * div),
                        };
                        for k in 0..d {
                            gx[r * d + k] += gs[k] * wv[k] / div - xs[k] * coef;
                        }
                    }
                });
                sink.acc(*w, |gw| {
                    for (r, &div) in divisors.iter().enumerate() {
                        if div <= 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            gw[k] += gd[r * d + k] * xv[r * d + k] / div;
                        }
                    }
                });
            }
            Op::Reduce { kind, x, axis } => {
                let xv = val(*x).data();
                let xs = val(*x).shape();
                let local = |k: usize, len: usize| match kind {
                    ReduceKind::Sum => 1.0,
                    ReduceKind::Mean => 1.0 / len as f64,
                    ReduceKind::AbsMean => sign(xv[k]) / len as f64,
                };
                sink.acc(*x, |gx| match axis {
                    None => {
                        let n = gx.len();
                        for k in 0..n {
                            gx[k] += gd[0] * local(k, n);
                        }
                    }
                    Some(axis) => {
                        let (outer, len, inner) = kernels::split_axis(xs, *axis);
                        for o in 0..outer {
                            for l in 0..len {
                                for j in 0..inner {
                                    let k = (o * len + l) * inner + j;
                                    gx[k] += gd[o * inner + j] * local(k, len);
                                }
                            }
                        }
                    }
                });
            }
            Op::Permute { x, perm } => {
                let back = kernels::permute_back(g, perm, val(*x).shape());
                sink.acc(*x, |gx| {
                    gx.iter_mut().zip(back.data()).for_each(|(a, b)| *a += b);
                });
            }
            Op::Reshape { x } => sink.acc(*x, |gx| {
                gx.iter_mut().zip(gd).for_each(|(a, b)| *a += b);
            }),
            Op::AxisMix { x, m, bias, axis } => {
                let xv = val(*x);
                let parts = kernels::split_axis(xv.shape(), *axis);
                let len_out = out.shape()[*axis];
                let mv = val(*m).data();
                sink.acc(*x, |gx| kernels::axis_mix_grad_x(gd, mv, parts, len_out, gx));
                sink.acc(*m, |gm| kernels::axis_mix_grad_m(xv.data(), gd, parts, len_out, gm));
                if let Some(b) = bias {
                    sink.acc(*b, |gb| kernels::axis_mix_grad_bias(gd, len_out, parts.2, gb));
                }
            }
            Op::Lerp { prev, next, gate, map } => {
                let gv = val(*gate).data();
                let nv = val(*next).data();
                sink.acc(*next, |gn| kernels::bcast_mul_acc(gn, &Bcast::Same, gd, gv, map));
                if let Some(p) = prev {
                    sink.acc(*p, |gp| kernels::lerp_grad_prev(gd, gv, gp));
                }
                let pv = prev.map(|p| val(p).data());
                sink.acc(*gate, |gg| match pv {
                    Some(pv) => kernels::lerp_grad_gate(gd, nv, pv, gg),
                    None => kernels::bcast_mul_acc(gg, map, gd, nv, &Bcast::Same),
                });
            }
            Op::MixUpdate {
                x,
                prev,
                m,
                bias,
                gate,
                axis,
                relu,
                fresh,
            } => {
                let xv = val(*x);
                let kernel = kernels::MixUpdate {
                    m: val(*m).data(),
                    bias: bias.map(|b| val(b).data()),
                    gate: gate.map(|g| val(g).data()[0]),
                    relu: *relu,
                    parts: kernels::split_axis(xv.shape(), *axis),
                };
                let pv = prev.map(|p| val(p).data());
                let fv = fresh.as_ref().unwrap_or(out).data();
                let buf = sink.buffer(gd.len());
                let mut gr = kernel.backward(xv.data(), pv, fv, gd, buf);
                match prev {
                    Some(p) => {
                        sink.acc(*x, |gx| kernels::axpy(gx, 1.0, &gr.pre));
                        if let Some(g) = kernel.gate {
                            kernels::axpy(&mut gr.pre, 1.0 - g, gd);
                        }
                        sink.put(*p, std::mem::take(&mut gr.pre));
                    }
                    None => sink.put(*x, std::mem::take(&mut gr.pre)),
                }
                sink.acc(*m, |gm| kernels::axpy(gm, 1.0, &gr.m));
                if let Some(b) = bias {
                    sink.acc(*b, |gb| kernels::axpy(gb, 1.0, &gr.bias));
                }
                if let Some(g) = gate {
                    sink.acc(*g, |gg| gg[0] += gr.gate);
                }
            }
        }
    }
}

/// Gradient slots for one backward pass, plus released buffers that are
/// reused for new slots instead of fresh allocations.
struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Tensor>],
    pool: &'a mut Vec<Vec<f64>>,
}

impl GradSink<'_> {
    const POOL_CAP: usize = 16;

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A buffer of `n` elements with unspecified contents.
    fn buffer(&mut self, n: usize) -> Vec<f64> {
        match self.pool.iter().rposition(|b| b.len() == n) {
            Some(k) => self.pool.swap_remove(k),
            None => vec![0.0; n],
        }
    }

    fn slot(&mut self, v: Var) -> &mut Tensor {
        if self.grads[v.0].is_none() {
            let shape = self.nodes[v.0].value.shape();
            let mut buf = self.buffer(numel(shape));
            buf.fill(0.0);
            self.grads[v.0] = Some(Tensor::from_parts(shape.to_vec(), buf));
        }
        self.grads[v.0].as_mut().expect("slot was just filled")
    }

    /// Accumulates into the gradient buffer of `v` when it requires one.
    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64])) {
        if self.wants(v) {
            f(self.slot(v).data_mut());
        }
    }

    /// Adds an owned gradient, moving it into an empty slot.
    fn put(&mut self, v: Var, data: Vec<f64>) {
        if !self.wants(v) {
            return self.recycle(data);
        }
        match &mut self.grads[v.0] {
            Some(t) => {
                kernels::axpy(t.data_mut(), 1.0, &data);
                self.recycle(data);
            }
            empty => *empty = Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), data)),
        }
    }

    fn recycle(&mut self, data: Vec<f64>) {
        if data.len() > 1 && self.pool.len() < Self::POOL_CAP {
            self.pool.push(data);
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
