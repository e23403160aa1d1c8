use std::collections::HashMap;

use super::ops::{self, Conv2dGeom};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

enum Op<S: Real> {
    Leaf,
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose(Var),
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddSuffix(Var, Var),
    AddPrefix(Var, Var),
    Repeat(Var),
    Concat(Vec<Var>, usize),
    Select(Var, usize, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Tensor<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Relu(Var),
    Gap(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv2dGeom,
    },
    Sum(Var),
    Mean(Var),
    Wing {
        pred: Var,
        residual: Vec<S>,
        width: S,
        curvature: S,
        scale: S,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Tensor<S>,
    },
}

impl<S: Real> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Bmm(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddSuffix(a, b) | AddPrefix(a, b) => {
                vec![*a, *b]
            }
            Transpose(a)
            | Permute(a, _)
            | Reshape(a)
            | Scale(a, _)
            | Repeat(a)
            | Select(a, _, _)
            | Softmax(a)
            | Gelu(a)
            | Relu(a)
            | Gap(a)
            | Sum(a)
            | Mean(a) => vec![*a],
            Concat(parts, _) => parts.clone(),
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Conv2d { x, w, b, .. } => vec![*x, *w, *b],
            Wing { pred, .. } => vec![*pred],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<S: Real> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Node ids increase monotonically, so reverse id order is a valid reverse
/// topological order. Outputs that depend only on non-trainable leaves are
/// stored as constants and never receive gradients.
///
/// Every recorded op also adds its arithmetic cost to a running tally (see
/// [`Tape::flops`]); the unit is one multiply-accumulate or one elementwise
/// operation, matching [`crate::metrics::cost`].
pub struct Tape<S: Real = f32> {
    nodes: Vec<Node<S>>,
    bound: HashMap<(u64, ParamId), Var>,
    flops: u64,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

// Per-element costs of nonlinear ops, in multiply-accumulate units.
pub(crate) const SOFTMAX_COST: u64 = 3;
pub(crate) const LAYER_NORM_COST: u64 = 4;
pub(crate) const GELU_COST: u64 = 3;
pub(crate) const RELU_COST: u64 = 1;

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            flops: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Arithmetic operations recorded so far.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, cost: u64) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        debug_assert!(
            !inputs.iter().all(|v| self.nodes[v.0].value.is_finite()) || value.is_finite(),
            "non-finite output from finite inputs"
        );
        self.flops += cost;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a leaf; repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.bound.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::matmul(self.value(a), self.value(b))?;
        let k = self.shape(a)[1] as u64;
        let cost = out.numel() as u64 * k;
        Ok(self.push(out, Op::MatMul(a, b), cost))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::bmm(self.value(a), self.value(b))?;
        let k = self.shape(a)[2] as u64;
        let cost = out.numel() as u64 * k;
        Ok(self.push(out, Op::Bmm(a, b), cost))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = ops::transpose_last2(self.value(a))?;
        Ok(self.push(out, Op::Transpose(a), 0))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = ops::permute(self.value(a), axes)?;
        Ok(self.push(out, Op::Permute(a, axes.to_vec()), 0))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(a), 0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::add(self.value(a), self.value(b))?;
        let cost = out.numel() as u64;
        Ok(self.push(out, Op::Add(a, b), cost))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::sub(self.value(a), self.value(b))?;
        let cost = out.numel() as u64;
        Ok(self.push(out, Op::Sub(a, b), cost))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = ops::mul(self.value(a), self.value(b))?;
        let cost = out.numel() as u64;
        Ok(self.push(out, Op::Mul(a, b), cost))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = ops::scale(self.value(a), c);
        let cost = out.numel() as u64;
        self.push(out, Op::Scale(a, c), cost)
    }

    /// `x + bias` with `bias.shape` a suffix of `x.shape`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = ops::add_suffix(self.value(x), self.value(bias))?;
        let cost = out.numel() as u64;
        Ok(self.push(out, Op::AddSuffix(x, bias), cost))
    }

    /// `x + v` with `v.shape` a prefix of `x.shape`, broadcast over the rest.
    pub fn add_prefix(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = ops::add_prefix(self.value(x), self.value(v))?;
        let cost = out.numel() as u64;
        Ok(self.push(out, Op::AddPrefix(x, v), cost))
    }

    pub fn repeat_leading(&mut self, a: Var, n: usize) -> Var {
        let out = ops::repeat_leading(self.value(a), n);
        self.push(out, Op::Repeat(a), 0)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = ops::concat(&values, axis)?;
        Ok(self.push(out, Op::Concat(parts.to_vec(), axis), 0))
    }

    pub fn select(&mut self, a: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = ops::index_select(self.value(a), axis, indices)?;
        Ok(self.push(out, Op::Select(a, axis, indices.to_vec()), 0))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = ops::softmax_last(self.value(a))?;
        let cost = SOFTMAX_COST * out.numel() as u64;
        Ok(self.push(out, Op::Softmax(a), cost))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let ln = ops::layer_norm_last(self.value(x), self.value(gain), self.value(bias), eps)?;
        let cost = LAYER_NORM_COST * ln.out.numel() as u64;
        Ok(self.push(
            ln.out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized: ln.normalized,
                rstd: ln.rstd,
            },
            cost,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = ops::gelu(self.value(a));
        let cost = GELU_COST * out.numel() as u64;
        self.push(out, Op::Gelu(a), cost)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = ops::relu(self.value(a));
        let cost = RELU_COST * out.numel() as u64;
        self.push(out, Op::Relu(a), cost)
    }

    pub fn gap(&mut self, a: Var) -> Result<Var> {
        let out = ops::gap(self.value(a))?;
        let cost = self.value(a).numel() as u64;
        Ok(self.push(out, Op::Gap(a), cost))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (out, geom) = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let patch = (geom.in_ch * geom.kernel * geom.kernel) as u64;
        let cost = out.numel() as u64 * (patch + 1);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, cost))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let cost = self.value(a).numel() as u64;
        self.push(out, Op::Sum(a), cost)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = Tensor::scalar(x.sum() / S::lit(x.numel().max(1) as f64));
        let cost = x.numel() as u64;
        self.push(out, Op::Mean(a), cost)
    }

    /// Mean Wing loss of `(pred - target) * scale`.
    pub fn wing_loss(&mut self, pred: Var, target: &Tensor<S>, width: S, curvature: S, scale: S) -> Result<Var> {
        if !(width > S::zero()) || !(curvature > S::zero()) {
            return Err(Error::config(
                "wing",
                format!("width {width} and curvature {curvature} must be positive"),
            ));
        }
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim("wing_loss", p.shape(), target.shape()));
        }
        let residual: Vec<S> = p.data().iter().zip(target.data()).map(|(&a, &b)| (a - b) * scale).collect();
        let n = S::lit(residual.len().max(1) as f64);
        let total = residual.iter().fold(S::zero(), |acc, &x| acc + wing_value(x, width, curvature));
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Wing {
                pred,
                residual,
                width,
                curvature,
                scale,
            },
            0,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let sh = x.shape();
        if sh.len() != 2 || sh[0] != labels.len() {
            return Err(Error::dim("cross_entropy", sh, &[labels.len()]));
        }
        let k = sh[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let probs = ops::softmax_last(x)?;
        let mut total = S::zero();
        for (row, &label) in x.data().chunks(k).zip(labels) {
            let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().fold(S::zero(), |a, &v| a + (v - max).exp()).ln() + max;
            total = total + lse - row[label];
        }
        let n = S::lit(labels.len().max(1) as f64);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            0,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), S::one()));
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, grad) in self.vjp(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, &v) in acc.data_mut().iter_mut().zip(grad.data()) {
                            *a = *a + v;
                        }
                    }
                    slot @ None => *slot = Some(grad),
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            bound: self.bound.clone(),
        })
    }

    fn vjp(&self, node: &Node<S>, g: &Tensor<S>) -> Vec<(Var, Tensor<S>)> {
        let val = |v: Var| self.value(v);
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(*a) {
                    let bt = ops::transpose_last2(val(*b)).unwrap();
                    out.push((*a, ops::matmul(g, &bt).unwrap()));
                }
                if need(*b) {
                    let at = ops::transpose_last2(val(*a)).unwrap();
                    out.push((*b, ops::matmul(&at, g).unwrap()));
                }
            }
            Op::Bmm(a, b) => {
                if need(*a) {
                    let bt = ops::transpose_last2(val(*b)).unwrap();
                    out.push((*a, ops::bmm(g, &bt).unwrap()));
                }
                if need(*b) {
                    let at = ops::transpose_last2(val(*a)).unwrap();
                    out.push((*b, ops::bmm(&at, g).unwrap()));
                }
            }
            Op::Transpose(a) => out.push((*a, ops::transpose_last2(g).unwrap())),
            Op::Permute(a, axes) => {
                out.push((*a, ops::permute(g, &ops::inverse_permutation(axes)).unwrap()));
            }
            Op::Reshape(a) => out.push((*a, g.reshape(val(*a).shape().to_vec()).unwrap())),
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, ops::mul(g, val(*b)).unwrap()));
                }
                if need(*b) {
                    out.push((*b, ops::mul(g, val(*a)).unwrap()));
                }
            }
            Op::Scale(a, c) => out.push((*a, ops::scale(g, *c))),
            Op::AddSuffix(x, r) => {
                out.push((*x, g.clone()));
                if need(*r) {
                    out.push((*r, ops::reduce_to_suffix(g, val(*r).shape())));
                }
            }
            Op::AddPrefix(x, v) => {
                out.push((*x, g.clone()));
                if need(*v) {
                    out.push((*v, ops::reduce_to_prefix(g, val(*v).shape())));
                }
            }
            Op::Repeat(a) => out.push((*a, ops::reduce_to_suffix(g, val(*a).shape()))),
            Op::Concat(parts, axis) => {
                let shapes: Vec<Vec<usize>> = parts.iter().map(|&p| val(p).shape().to_vec()).collect();
                for (p, gp) in parts.iter().zip(ops::concat_backward(g, &shapes, *axis)) {
                    out.push((*p, gp));
                }
            }
            Op::Select(a, axis, indices) => {
                out.push((*a, ops::index_select_backward(g, val(*a).shape(), *axis, indices)));
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = *y.shape().last().unwrap();
                let mut dx = vec![S::zero(); y.numel()];
                for ((yr, gr), dr) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot = yr.iter().zip(gr).fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                out.push((*a, Tensor::new(y.shape().to_vec(), dx).unwrap()));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let d = *normalized.shape().last().unwrap();
                let gv = val(*gain).data();
                if need(*bias) {
                    out.push((*bias, ops::reduce_to_suffix(g, &[d])));
                }
                if need(*gain) {
                    out.push((*gain, ops::reduce_to_suffix(&ops::mul(g, normalized).unwrap(), &[d])));
                }
                if need(*x) {
                    let width = S::lit(d as f64);
                    let mut dx = vec![S::zero(); g.numel()];
                    for (r, ((gr, xr), dr)) in g
                        .data()
                        .chunks(d)
                        .zip(normalized.data().chunks(d))
                        .zip(dx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut mean_dxh = S::zero();
                        let mut mean_dxh_x = S::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gv[j];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_x = mean_dxh_x + dxh * xr[j];
                        }
                        mean_dxh = mean_dxh / width;
                        mean_dxh_x = mean_dxh_x / width;
                        for j in 0..d {
                            dr[j] = rstd[r] * (gr[j] * gv[j] - mean_dxh - xr[j] * mean_dxh_x);
                        }
                    }
                    out.push((*x, Tensor::new(g.shape().to_vec(), dx).unwrap()));
                }
            }
            Op::Gelu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| gv * ops::gelu_grad_scalar(xv))
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::Relu(a) => {
                let x = val(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > S::zero() { gv } else { S::zero() })
                    .collect();
                out.push((*a, Tensor::new(x.shape().to_vec(), data).unwrap()));
            }
            Op::Gap(a) => {
                let x = val(*a);
                let r = x.rank();
                let area = x.shape()[r - 2] * x.shape()[r - 1];
                let inv = S::one() / S::lit(area as f64);
                let mut dx = Vec::with_capacity(x.numel());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv * inv, area));
                }
                out.push((*a, Tensor::new(x.shape().to_vec(), dx).unwrap()));
            }
            Op::Conv2d { x, w, b, geom } => {
                let grads = ops::conv2d_backward(geom, val(*x), val(*w), g, [need(*x), need(*w), need(*b)]);
                if let Some(dx) = grads.dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = grads.dw {
                    out.push((*w, dw));
                }
                if let Some(db) = grads.db {
                    out.push((*b, db));
                }
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                out.push((*a, Tensor::full(val(*a).shape().to_vec(), gv)));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let gv = g.data()[0] / S::lit(x.numel().max(1) as f64);
                out.push((*a, Tensor::full(x.shape().to_vec(), gv)));
            }
            Op::Wing {
                pred,
                residual,
                width,
                curvature,
                scale,
            } => {
                let factor = g.data()[0] * *scale / S::lit(residual.len().max(1) as f64);
                let data = residual.iter().map(|&x| factor * wing_slope(x, *width, *curvature)).collect();
                out.push((*pred, Tensor::new(val(*pred).shape().to_vec(), data).unwrap()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = probs.shape()[1];
                let factor = g.data()[0] / S::lit(labels.len().max(1) as f64);
                let mut dx = probs.data().to_vec();
                for (row, &label) in dx.chunks_mut(k).zip(labels) {
                    row[label] = row[label] - S::one();
                    for v in row.iter_mut() {
                        *v = *v * factor;
                    }
                }
                out.push((*logits, Tensor::new(probs.shape().to_vec(), dx).unwrap()));
            }
        }
        out
    }
}

pub(crate) fn wing_value<S: Real>(x: S, width: S, curvature: S) -> S {
    let ax = x.abs();
    if ax < width {
        width * (S::one() + ax / curvature).ln()
    } else {
        ax - (width - width * (S::one() + width / curvature).ln())
    }
}

fn wing_slope<S: Real>(x: S, width: S, curvature: S) -> S {
    let ax = x.abs();
    let sign = if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    };
    if ax < width {
        sign * width / (curvature + ax)
    } else {
        sign
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<S: Real> {
    grads: Vec<Option<Tensor<S>>>,
    bound: HashMap<(u64, ParamId), Var>,
}

impl<S: Real> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a parameter bound from `store`, if it received one.
    pub fn param(&self, store: &ParamStore<S>, id: ParamId) -> Option<&Tensor<S>> {
        self.bound.get(&(store.uid(), id)).and_then(|&v| self.wrt(v))
    }

    /// Number of tensors holding a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}
