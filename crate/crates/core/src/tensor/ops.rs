//! Forward kernels on plain tensors. The tape in [`super::Tape`] records
//! these and supplies the matching vector-Jacobian products.

use rayon::prelude::*;

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`, accumulating each entry in ascending `k`.
pub(crate) fn gemm_acc<S: Real>(m: usize, k: usize, n: usize, a: &[S], b: &[S], out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    }
}

fn transpose_raw<S: Real>(rows: usize, cols: usize, src: &[S]) -> Vec<S> {
    let mut out = vec![S::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

pub fn matmul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
        return Err(Error::dim("matmul", ash, bsh));
    }
    let (m, k, n) = (ash[0], ash[1], bsh[1]);
    let mut out = vec![S::zero(); m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new([m, n], out)
}

/// Batched product `[B×m×k] · [B×k×n] -> [B×m×n]`.
pub fn bmm<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
        return Err(Error::dim("bmm", ash, bsh));
    }
    let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
    let mut out = vec![S::zero(); batch * m * n];
    for t in 0..batch {
        gemm_acc(
            m,
            k,
            n,
            &a.data()[t * m * k..(t + 1) * m * k],
            &b.data()[t * k * n..(t + 1) * k * n],
            &mut out[t * m * n..(t + 1) * m * n],
        );
    }
    Tensor::new([batch, m, n], out)
}

/// Swaps the last two axes.
pub fn transpose_last2<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = x.shape();
    if sh.len() < 2 {
        return Err(Error::dim("transpose", sh, &[]));
    }
    let r = sh.len();
    let (rows, cols) = (sh[r - 2], sh[r - 1]);
    let block = rows * cols;
    let mut data = Vec::with_capacity(x.numel());
    for chunk in x.data().chunks(block.max(1)) {
        data.extend(transpose_raw(rows, cols, chunk));
    }
    let mut shape = sh.to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out.shape[i] = x.shape[axes[i]]`.
pub fn permute<S: Real>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let sh = x.shape();
    let mut seen = vec![false; sh.len()];
    if axes.len() != sh.len() || axes.iter().any(|&a| a >= sh.len() || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", sh, axes));
    }
    let in_strides = strides(sh);
    let out_shape: Vec<usize> = axes.iter().map(|&a| sh[a]).collect();
    let mut data = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; sh.len()];
    for _ in 0..x.numel() {
        let src: usize = idx.iter().zip(axes).map(|(&i, &a)| i * in_strides[a]).sum();
        data.push(x.data()[src]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, data)
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

fn zip_same<S: Real>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_same("add", a, b, |x, y| x + y)
}

pub fn sub<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_same("sub", a, b, |x, y| x - y)
}

pub fn mul<S: Real>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    zip_same("mul", a, b, |x, y| x * y)
}

pub fn scale<S: Real>(x: &Tensor<S>, c: S) -> Tensor<S> {
    x.map(|v| v * c)
}

/// `x + r` where `r.shape` is a suffix of `x.shape` (bias-style broadcast).
pub fn add_suffix<S: Real>(x: &Tensor<S>, r: &Tensor<S>) -> Result<Tensor<S>> {
    let (xs, rs) = (x.shape(), r.shape());
    if rs.len() > xs.len() || xs[xs.len() - rs.len()..] != *rs {
        return Err(Error::dim("broadcast add", xs, rs));
    }
    let width = r.numel().max(1);
    let mut data = x.data().to_vec();
    for chunk in data.chunks_mut(width) {
        for (v, &b) in chunk.iter_mut().zip(r.data()) {
            *v = *v + b;
        }
    }
    Tensor::new(xs.to_vec(), data)
}

/// `x + v` where `v.shape` is a prefix of `x.shape`; each entry of `v` is
/// added to the whole trailing block it indexes (e.g. per-channel over space).
pub fn add_prefix<S: Real>(x: &Tensor<S>, v: &Tensor<S>) -> Result<Tensor<S>> {
    let (xs, vs) = (x.shape(), v.shape());
    if vs.len() > xs.len() || xs[..vs.len()] != *vs {
        return Err(Error::dim("prefix add", xs, vs));
    }
    let block: usize = xs[vs.len()..].iter().product();
    let mut data = x.data().to_vec();
    for (chunk, &b) in data.chunks_mut(block.max(1)).zip(v.data()) {
        for e in chunk.iter_mut() {
            *e = *e + b;
        }
    }
    Tensor::new(xs.to_vec(), data)
}

/// Sums `g` over its trailing axes down to `prefix` shape.
pub(crate) fn reduce_to_prefix<S: Real>(g: &Tensor<S>, prefix: &[usize]) -> Tensor<S> {
    let block: usize = g.shape()[prefix.len()..].iter().product();
    let data = g
        .data()
        .chunks(block.max(1))
        .map(|c| c.iter().fold(S::zero(), |a, &v| a + v))
        .collect();
    Tensor::new(prefix.to_vec(), data).expect("prefix reduction")
}

/// Sums `g` over its leading axes down to `suffix` shape.
pub(crate) fn reduce_to_suffix<S: Real>(g: &Tensor<S>, suffix: &[usize]) -> Tensor<S> {
    let width: usize = suffix.iter().product();
    let mut out = vec![S::zero(); width];
    for chunk in g.data().chunks(width.max(1)) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o = *o + v;
        }
    }
    Tensor::new(suffix.to_vec(), out).expect("suffix reduction")
}

/// Stacks `n` copies of `x` along a new leading axis.
pub fn repeat_leading<S: Real>(x: &Tensor<S>, n: usize) -> Tensor<S> {
    let mut shape = vec![n];
    shape.extend_from_slice(x.shape());
    let mut data = Vec::with_capacity(n * x.numel());
    for _ in 0..n {
        data.extend_from_slice(x.data());
    }
    Tensor::new(shape, data).expect("repeat")
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, inner)
}

pub fn concat<S: Real>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts.first().ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::dim("concat", base, &[axis]));
    }
    for p in parts {
        let sh = p.shape();
        if sh.len() != base.len() || sh.iter().zip(base).enumerate().any(|(i, (a, b))| i != axis && a != b) {
            return Err(Error::dim("concat", base, sh));
        }
    }
    let (outer, inner) = outer_inner(base, axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = base.to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

pub fn index_select<S: Real>(x: &Tensor<S>, axis: usize, indices: &[usize]) -> Result<Tensor<S>> {
    let sh = x.shape();
    if axis >= sh.len() {
        return Err(Error::dim("index_select", sh, &[axis]));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= sh[axis]) {
        return Err(Error::Contract(format!(
            "index {bad} out of range for axis {axis} of extent {}",
            sh[axis]
        )));
    }
    let (outer, inner) = outer_inner(sh, axis);
    let extent = sh[axis];
    let mut data = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            let start = (o * extent + i) * inner;
            data.extend_from_slice(&x.data()[start..start + inner]);
        }
    }
    let mut shape = sh.to_vec();
    shape[axis] = indices.len();
    Tensor::new(shape, data)
}

pub(crate) fn index_select_backward<S: Real>(g: &Tensor<S>, in_shape: &[usize], axis: usize, indices: &[usize]) -> Tensor<S> {
    let (outer, inner) = outer_inner(in_shape, axis);
    let extent = in_shape[axis];
    let mut out = Tensor::zeros(in_shape.to_vec());
    let od = out.data_mut();
    for o in 0..outer {
        for (j, &i) in indices.iter().enumerate() {
            let src = (o * indices.len() + j) * inner;
            let dst = (o * extent + i) * inner;
            for t in 0..inner {
                od[dst + t] = od[dst + t] + g.data()[src + t];
            }
        }
    }
    out
}

pub(crate) fn concat_backward<S: Real>(g: &Tensor<S>, shapes: &[Vec<usize>], axis: usize) -> Vec<Tensor<S>> {
    let (outer, inner) = outer_inner(g.shape(), axis);
    let total = g.shape()[axis];
    let mut offset = 0;
    shapes
        .iter()
        .map(|sh| {
            let len = sh[axis] * inner;
            let mut data = Vec::with_capacity(outer * len);
            for o in 0..outer {
                let start = o * total * inner + offset;
                data.extend_from_slice(&g.data()[start..start + len]);
            }
            offset += len;
            Tensor::new(sh.clone(), data).expect("concat split")
        })
        .collect()
}

/// Row-wise softmax over the last axis, stabilised by max-subtraction.
pub fn softmax_last<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = x.shape();
    let n = *sh.last().ok_or_else(|| Error::dim("softmax", sh, &[]))?;
    let mut data = x.data().to_vec();
    for row in data.chunks_mut(n.max(1)) {
        let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
        let mut total = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total = total + *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    Tensor::new(sh.to_vec(), data)
}

pub struct LayerNormOut<S: Real> {
    pub out: Tensor<S>,
    pub normalized: Tensor<S>,
    pub rstd: Vec<S>,
}

/// Layer normalisation over the last axis with affine gain and bias.
pub fn layer_norm_last<S: Real>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<LayerNormOut<S>> {
    let sh = x.shape();
    let d = *sh.last().ok_or_else(|| Error::dim("layer_norm", sh, &[]))?;
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::dim("layer_norm", sh, gain.shape()));
    }
    let width = S::lit(d as f64);
    let mut normalized = x.data().to_vec();
    let mut out = vec![S::zero(); x.numel()];
    let mut rstds = Vec::with_capacity(x.numel() / d.max(1));
    for (row, out_row) in normalized.chunks_mut(d).zip(out.chunks_mut(d)) {
        let mean = row.iter().fold(S::zero(), |a, &v| a + v) / width;
        let var = row.iter().fold(S::zero(), |a, &v| a + (v - mean) * (v - mean)) / width;
        let rstd = S::one() / (var + eps).sqrt();
        rstds.push(rstd);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * rstd;
            out_row[j] = *v * gain.data()[j] + bias.data()[j];
        }
    }
    Ok(LayerNormOut {
        out: Tensor::new(sh.to_vec(), out)?,
        normalized: Tensor::new(sh.to_vec(), normalized)?,
        rstd: rstds,
    })
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn gelu_scalar<S: Real>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    half * x * (S::one() + inner.tanh())
}

pub fn gelu_grad_scalar<S: Real>(x: S) -> S {
    let half = S::lit(0.5);
    let inner = S::lit(GELU_C) * (x + S::lit(GELU_K) * x * x * x);
    let t = inner.tanh();
    let dinner = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_K) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * dinner
}

pub fn gelu<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

pub fn relu<S: Real>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Global average pooling over the last two (spatial) axes.
pub fn gap<S: Real>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let sh = x.shape();
    if sh.len() < 3 {
        return Err(Error::dim("gap", sh, &[]));
    }
    let r = sh.len();
    let area = sh[r - 2] * sh[r - 1];
    if area == 0 {
        return Err(Error::dim("gap", sh, &[sh[r - 2], sh[r - 1]]));
    }
    let denom = S::lit(area as f64);
    let data = x
        .data()
        .chunks(area)
        .map(|c| c.iter().fold(S::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::new(sh[..r - 2].to_vec(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn check(x: &[usize], w: &[usize], b: &[usize], stride: usize, pad: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || w[1] != x[1] || w[2] != w[3] || b != [w[0]] {
            return Err(Error::dim("conv2d", x, w));
        }
        if stride == 0 || x[2] + 2 * pad < w[2] || x[3] + 2 * pad < w[3] {
            return Err(Error::dim("conv2d", x, w));
        }
        Ok(Self {
            batch: x[0],
            in_ch: x[1],
            height: x[2],
            width: x[3],
            out_ch: w[0],
            kernel: w[2],
            stride,
            pad,
        })
    }
}

fn im2col<S: Real>(g: &Conv2dGeom, x: &[S]) -> Vec<S> {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    let mut cols = vec![S::zero(); g.in_ch * k * k * ho * wo];
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[oy * wo + ox] = x[(c * g.height + iy as usize) * g.width + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_acc<S: Real>(g: &Conv2dGeom, cols: &[S], dx: &mut [S]) {
    let (ho, wo) = g.out_hw();
    let k = g.kernel;
    for c in 0..g.in_ch {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            let at = (c * g.height + iy as usize) * g.width + ix as usize;
                            dx[at] = dx[at] + src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, `x[b×ci×h×w] ⊛ w[co×ci×k×k] + bias[co]`.
pub fn conv2d<S: Real>(x: &Tensor<S>, w: &Tensor<S>, bias: &Tensor<S>, stride: usize, pad: usize) -> Result<(Tensor<S>, Conv2dGeom)> {
    let g = Conv2dGeom::check(x.shape(), w.shape(), bias.shape(), stride, pad)?;
    let (ho, wo) = g.out_hw();
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * ho * wo;
    let patch = g.in_ch * g.kernel * g.kernel;
    let mut out = vec![S::zero(); g.batch * out_len];
    out.par_chunks_mut(out_len.max(1))
        .zip(x.data().par_chunks(in_len.max(1)))
        .for_each(|(o, xb)| {
            for (co, plane) in o.chunks_mut(ho * wo).enumerate() {
                plane.fill(bias.data()[co]);
            }
            let cols = im2col(&g, xb);
            gemm_acc(g.out_ch, patch, ho * wo, w.data(), &cols, o);
        });
    Ok((Tensor::new([g.batch, g.out_ch, ho, wo], out)?, g))
}

pub(crate) struct Conv2dGrads<S: Real> {
    pub dx: Option<Tensor<S>>,
    pub dw: Option<Tensor<S>>,
    pub db: Option<Tensor<S>>,
}

pub(crate) fn conv2d_backward<S: Real>(g: &Conv2dGeom, x: &Tensor<S>, w: &Tensor<S>, grad: &Tensor<S>, need: [bool; 3]) -> Conv2dGrads<S> {
    let (ho, wo) = g.out_hw();
    let in_len = g.in_ch * g.height * g.width;
    let out_len = g.out_ch * ho * wo;
    let patch = g.in_ch * g.kernel * g.kernel;
    let w_t = transpose_raw(g.out_ch, patch, w.data());

    type Grads<S> = (Option<Vec<S>>, Option<Vec<S>>);
    let per_sample: Vec<Grads<S>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xb = &x.data()[b * in_len..(b + 1) * in_len];
            let gb = &grad.data()[b * out_len..(b + 1) * out_len];
            let dw = need[1].then(|| {
                let cols_t = transpose_raw(patch, ho * wo, &im2col(g, xb));
                let mut dw = vec![S::zero(); g.out_ch * patch];
                gemm_acc(g.out_ch, ho * wo, patch, gb, &cols_t, &mut dw);
                dw
            });
            let dx = need[0].then(|| {
                let mut dcols = vec![S::zero(); patch * ho * wo];
                gemm_acc(patch, g.out_ch, ho * wo, &w_t, gb, &mut dcols);
                let mut dx = vec![S::zero(); in_len];
                col2im_acc(g, &dcols, &mut dx);
                dx
            });
            (dx, dw)
        })
        .collect();

    let dx = need[0].then(|| {
        let data = per_sample.iter().flat_map(|(dx, _)| dx.as_ref().unwrap().iter().copied()).collect();
        Tensor::new([g.batch, g.in_ch, g.height, g.width], data).unwrap()
    });
    let dw = need[1].then(|| {
        let mut acc = vec![S::zero(); g.out_ch * patch];
        for (_, dw) in &per_sample {
            for (a, &v) in acc.iter_mut().zip(dw.as_ref().unwrap()) {
                *a = *a + v;
            }
        }
        Tensor::new(w.shape().to_vec(), acc).unwrap()
    });
    let db = need[2].then(|| {
        let mut acc = vec![S::zero(); g.out_ch];
        for gb in grad.data().chunks(out_len.max(1)) {
            for (co, plane) in gb.chunks(ho * wo).enumerate() {
                acc[co] = plane.iter().fold(acc[co], |a, &v| a + v);
            }
        }
        Tensor::new([g.out_ch], acc).unwrap()
    });
    Conv2dGrads { dx, dw, db }
}
