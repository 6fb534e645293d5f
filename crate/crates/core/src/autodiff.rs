//! Reverse-mode differentiation over a linear tape.
//!
//! Every op appends one node holding its forward value. `backward` walks the
//! nodes in reverse insertion order, which is a reverse topological order
//! because inputs always precede their consumers. Gradients of nodes with
//! several consumers accumulate additively.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::kernels::{gemm, MatRef};
use crate::math;
use crate::tensor::{numel_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    MeanLast(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Softmax(Var),
    Sigmoid(Var),
    Gelu(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // Op-specific saved state (layernorm: normalized input then 1/std per row).
    aux: Vec<f64>,
}

/// Ordered record of primitive ops.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch { op, lhs: a.shape().to_vec(), rhs: b.shape().to_vec() }
}

/// Numpy-style broadcast of two shapes.
fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    let (sa, sb) = (a.shape(), b.shape());
    let rank = sa.len().max(sb.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + sa.len() >= rank { sa[i + sa.len() - rank] } else { 1 };
        let db = if i + sb.len() >= rank { sb[i + sb.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(mismatch(op, a, b)),
        };
    }
    Ok(out)
}

/// Calls `f(out_index, src_index)` for every element of `out_shape`, where
/// `src_shape` broadcasts to `out_shape`.
fn for_each_broadcast(out_shape: &[usize], src_shape: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out_shape.len();
    let n = numel_of(out_shape);
    if src_shape == out_shape {
        (0..n).for_each(|i| f(i, i));
        return;
    }
    let src_n = numel_of(src_shape);
    // Suffix broadcast: src equals the trailing dims of out.
    if src_shape.len() <= rank && out_shape[rank - src_shape.len()..] == *src_shape {
        (0..n).for_each(|i| f(i, i % src_n));
        return;
    }
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let k = i as isize - (rank - src_shape.len()) as isize;
        if k >= 0 {
            let d = src_shape[k as usize];
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in 0..n {
        f(o, src);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn expand(t: &Tensor, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; numel_of(shape)];
    let d = t.data();
    for_each_broadcast(shape, t.shape(), |o, s| out[o] = d[s]);
    Tensor::new(shape.to_vec(), out).expect("expand shape")
}

fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = vec![0.0; numel_of(shape)];
    let d = g.data();
    for_each_broadcast(g.shape(), shape, |o, s| out[s] += d[o]);
    Tensor::new(shape.to_vec(), out).expect("reduce shape")
}

/// Splits a shape at `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel_of(&shape[..axis]), shape[axis], numel_of(&shape[axis + 1..]))
}

enum MatMulKind {
    /// `[.., m, k] x [k, n]`, leading dims folded into rows.
    Flat { rows: usize, k: usize, n: usize },
    /// `[B, m, k] x [B, k, n]`.
    Batched { b: usize, m: usize, k: usize, n: usize },
    /// `[m, k] x [B, k, n]`.
    LeftBroadcast { b: usize, m: usize, k: usize, n: usize },
}

fn matmul_kind(a: &Tensor, b: &Tensor) -> Result<(MatMulKind, Vec<usize>)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() < 2 || sb.len() < 2 {
        return Err(mismatch("matmul", a, b));
    }
    let k = sa[sa.len() - 1];
    if sb.len() == 2 {
        if sb[0] != k {
            return Err(mismatch("matmul", a, b));
        }
        let mut out = sa.to_vec();
        *out.last_mut().unwrap() = sb[1];
        let rows = numel_of(&sa[..sa.len() - 1]);
        return Ok((MatMulKind::Flat { rows, k, n: sb[1] }, out));
    }
    if sb.len() == 3 && sb[1] == k {
        if sa.len() == 3 && sa[0] == sb[0] {
            let kind = MatMulKind::Batched { b: sa[0], m: sa[1], k, n: sb[2] };
            return Ok((kind, vec![sa[0], sa[1], sb[2]]));
        }
        if sa.len() == 2 {
            let kind = MatMulKind::LeftBroadcast { b: sb[0], m: sa[0], k, n: sb[2] };
            return Ok((kind, vec![sb[0], sa[0], sb[2]]));
        }
    }
    Err(mismatch("matmul", a, b))
}

fn gelu_value(x: f64) -> f64 {
    x * math::normal_cdf(x)
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

/// Layer-norm epsilon used throughout.
pub const LAYERNORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node, keeping the allocation for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Vec<f64>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        self.nodes.push(Node { value, op, requires_grad, aux });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, Vec::new())
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, Vec::new())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (kind, shape) = matmul_kind(ta, tb)?;
        let mut out = vec![0.0; numel_of(&shape)];
        let (da, db) = (ta.data(), tb.data());
        match kind {
            MatMulKind::Flat { rows, k, n } => {
                gemm(MatRef::new(da, rows, k), MatRef::new(db, k, n), &mut out, 0.0)
            }
            MatMulKind::Batched { b, m, k, n } => {
                for i in 0..b {
                    gemm(
                        MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k),
                        MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
            MatMulKind::LeftBroadcast { b, m, k, n } => {
                for i in 0..b {
                    gemm(
                        MatRef::new(da, m, k),
                        MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n),
                        &mut out[i * m * n..(i + 1) * m * n],
                        0.0,
                    );
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::MatMul(a, b), rg, Vec::new())
    }

    /// `x W + b` for `x: [.., k]`, `W: [k, n]`, `b: [n]`, in one pass.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (k, n) = tw.dims2().map_err(|_| mismatch("linear", tx, tw))?;
        if tx.shape().last() != Some(&k) || tb.shape() != [n] {
            return Err(mismatch("linear", tx, tw));
        }
        let rows = tx.numel() / k;
        let mut out = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            out.extend_from_slice(tb.data());
        }
        gemm(MatRef::new(tx.data(), rows, k), MatRef::new(tw.data(), k, n), &mut out, 1.0);
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b }, rg, Vec::new())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(op, ta, tb)?;
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(shape, data);
        }
        let ea = if ta.shape() == shape.as_slice() { None } else { Some(expand(ta, &shape)) };
        let ea = ea.as_ref().unwrap_or(ta);
        let mut out = vec![0.0; numel_of(&shape)];
        let (da, db) = (ea.data(), tb.data());
        for_each_broadcast(&shape, tb.shape(), |o, s| out[o] = f(da[o], db[s]));
        Tensor::new(shape, out)
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg, Vec::new())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg, Vec::new())
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg, Vec::new())
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let t = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg, Vec::new())
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let shape = ta.shape();
        if shape.len() < 2 {
            return Err(invalid("transpose: rank < 2"));
        }
        let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let batch = numel_of(&shape[..shape.len() - 2]);
        let mut out_shape = shape.to_vec();
        let rank = out_shape.len();
        out_shape.swap(rank - 2, rank - 1);
        let t = Tensor::new(out_shape, transpose_data(ta.data(), batch, r, c))?;
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg, Vec::new())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg, Vec::new())
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| invalid("concat: no inputs"))?);
        if axis >= first.rank() {
            return Err(invalid("concat: axis out of range"));
        }
        let mut shape = first.shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let same_rest = s.len() == shape.len()
                && s.iter().zip(&shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(mismatch("concat", first, self.value(p)));
            }
            total += s[axis];
        }
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec(), axis), rg, Vec::new())
    }

    /// Keeps `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        if axis >= ta.rank() || start >= end || end > ta.shape()[axis] {
            return Err(invalid("slice: bad range"));
        }
        let (outer, len, inner) = split_axis(ta.shape(), axis);
        let mut shape = ta.shape().to_vec();
        shape[axis] = end - start;
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::Slice { x: a, axis, start }, rg, Vec::new())
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg, Vec::new())
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let t = Tensor::scalar(ta.sum() / ta.numel() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg, Vec::new())
    }

    /// Mean over the last axis, keeping it as a size-1 axis.
    pub fn mean_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = *ta.shape().last().ok_or_else(|| invalid("mean_last: scalar"))?;
        let out: Vec<f64> = ta.data().chunks(d).map(|r| r.iter().sum::<f64>() / d as f64).collect();
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        let rg = self.rg(a);
        self.push(Tensor::new(shape, out)?, Op::MeanLast(a), rg, Vec::new())
    }

    /// Normalizes over the last axis, then applies `gamma * x + beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().ok_or_else(|| invalid("layernorm: scalar"))?;
        if tg.numel() != d || tb.numel() != d {
            return Err(mismatch("layernorm", tx, tg));
        }
        let rows = tx.numel() / d;
        let mut out = vec![0.0; tx.numel()];
        let mut aux = vec![0.0; tx.numel() + rows];
        let (g, b) = (tg.data(), tb.data());
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rstd = 1.0 / math::sqrt(var + LAYERNORM_EPS);
            for j in 0..d {
                let xh = (row[j] - mu) * rstd;
                aux[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
            aux[tx.numel() + r] = rstd;
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta }, rg, aux)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let d = *ta.shape().last().ok_or_else(|| invalid("softmax: scalar"))?;
        let mut out = vec![0.0; ta.numel()];
        for (row, o) in ta.data().chunks(d).zip(out.chunks_mut(d)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| if v > m { v } else { m });
            let mut s = 0.0;
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov = math::exp(v - m);
                s += *ov;
            }
            o.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg, Vec::new())
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(sigmoid_value);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg, Vec::new())
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let rg = self.rg(a);
        let x = self.value(a);
        let (t, aux) = if rg {
            let cdf: Vec<f64> = x.data().iter().map(|&v| math::normal_cdf(v)).collect();
            let out = x.data().iter().zip(&cdf).map(|(v, p)| v * p).collect();
            (Tensor::new(x.shape().to_vec(), out)?, cdf)
        } else {
            (x.map(gelu_value), Vec::new())
        };
        self.push(t, Op::Gelu(a), rg, aux)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(invalid("backward: output is not a scalar"));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape().to_vec(), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (k, n) = tw.dims2()?;
                let rows = tx.numel() / k;
                let gm = MatRef::new(g.data(), rows, n);
                if self.rg(*x) {
                    let mut gx = vec![0.0; tx.numel()];
                    gemm(gm, MatRef::new(tw.data(), k, n).t(), &mut gx, 0.0);
                    self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
                }
                if self.rg(*w) {
                    let mut gw = vec![0.0; k * n];
                    gemm(MatRef::new(tx.data(), rows, k).t(), gm, &mut gw, 0.0);
                    self.accumulate(grads, *w, Tensor::new([k, n], gw)?);
                }
                if self.rg(*b) {
                    let mut gb = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new([n], gb)?);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (kind, _) = matmul_kind(ta, tb)?;
                let (da, db, dg) = (ta.data(), tb.data(), g.data());
                let mut ga = vec![0.0; ta.numel()];
                let mut gb = vec![0.0; tb.numel()];
                match kind {
                    MatMulKind::Flat { rows, k, n } => {
                        let gm = MatRef::new(dg, rows, n);
                        if self.rg(*a) {
                            gemm(gm, MatRef::new(db, k, n).t(), &mut ga, 0.0);
                        }
                        if self.rg(*b) {
                            gemm(MatRef::new(da, rows, k).t(), gm, &mut gb, 0.0);
                        }
                    }
                    MatMulKind::Batched { b, m, k, n } => {
                        for i in 0..b {
                            let gm = MatRef::new(&dg[i * m * n..(i + 1) * m * n], m, n);
                            let bm = MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n);
                            let am = MatRef::new(&da[i * m * k..(i + 1) * m * k], m, k);
                            gemm(gm, bm.t(), &mut ga[i * m * k..(i + 1) * m * k], 0.0);
                            gemm(am.t(), gm, &mut gb[i * k * n..(i + 1) * k * n], 0.0);
                        }
                    }
                    MatMulKind::LeftBroadcast { b: batch, m, k, n } => {
                        let am = MatRef::new(da, m, k);
                        for i in 0..batch {
                            let gm = MatRef::new(&dg[i * m * n..(i + 1) * m * n], m, n);
                            let bm = MatRef::new(&db[i * k * n..(i + 1) * k * n], k, n);
                            if self.rg(*a) {
                                gemm(gm, bm.t(), &mut ga, if i == 0 { 0.0 } else { 1.0 });
                            }
                            if self.rg(*b) {
                                gemm(am.t(), gm, &mut gb[i * k * n..(i + 1) * k * n], 0.0);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                self.accumulate(grads, *b, Tensor::new(tb.shape().to_vec(), gb)?);
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let ga = reduce_to(g, self.value(*a).shape());
                let mut gb = reduce_to(g, self.value(*b).shape());
                if sign < 0.0 {
                    gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let shape = g.shape();
                if self.rg(*a) {
                    let eb = expand(tb, shape);
                    let prod = g.zip_map(&eb, |x, y| x * y)?;
                    self.accumulate(grads, *a, reduce_to(&prod, ta.shape()));
                }
                if self.rg(*b) {
                    let ea = expand(ta, shape);
                    let prod = g.zip_map(&ea, |x, y| x * y)?;
                    self.accumulate(grads, *b, reduce_to(&prod, tb.shape()));
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Transpose(a) => {
                let shape = g.shape();
                let (r, c) = (shape[shape.len() - 2], shape[shape.len() - 1]);
                let batch = numel_of(&shape[..shape.len() - 2]);
                let data = transpose_data(g.data(), batch, r, c);
                self.accumulate(grads, *a, Tensor::new(self.value(*a).shape().to_vec(), data)?);
            }
            Op::Reshape(a) => {
                let t = g.clone().reshape(self.value(*a).shape().to_vec())?;
                self.accumulate(grads, *a, t);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = split_axis(g.shape(), *axis);
                let mut offset = 0;
                let total = g.shape()[*axis];
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let len = ps[*axis];
                    if self.rg(p) {
                        let mut out = Vec::with_capacity(numel_of(&ps));
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(ps, out)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, len, inner) = split_axis(&xs, *axis);
                let width = g.shape()[*axis];
                let mut out = vec![0.0; numel_of(&xs)];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    out[dst..dst + width * inner].copy_from_slice(&g.data()[src..src + width * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(xs, out)?);
            }
            Op::Sum(a) => {
                let v = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.value(*a).shape().to_vec(), v));
            }
            Op::Mean(a) => {
                let ta = self.value(*a);
                let v = g.data()[0] / ta.numel() as f64;
                self.accumulate(grads, *a, Tensor::full(ta.shape().to_vec(), v));
            }
            Op::MeanLast(a) => {
                let ta = self.value(*a);
                let d = *ta.shape().last().unwrap();
                let mut out = vec![0.0; ta.numel()];
                for (r, chunk) in out.chunks_mut(d).enumerate() {
                    chunk.fill(g.data()[r] / d as f64);
                }
                self.accumulate(grads, *a, Tensor::new(ta.shape().to_vec(), out)?);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let tx = self.value(*x);
                let d = *tx.shape().last().unwrap();
                let n = tx.numel();
                let (xhat, rstd) = node.aux.split_at(n);
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; n];
                let mut gg = vec![0.0; d];
                let mut gbt = vec![0.0; d];
                for r in 0..n / d {
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        gg[j] += gr[j] * xr[j];
                        gbt[j] += gr[j];
                        let dxh = gr[j] * gam[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xr[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gr[j] * gam[j];
                        gx[r * d + j] = rstd[r] * (dxh - mean_dxh - xr[j] * mean_dxh_xh);
                    }
                }
                let gshape = self.value(*gamma).shape().to_vec();
                let bshape = self.value(*beta).shape().to_vec();
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx)?);
                self.accumulate(grads, *gamma, Tensor::new(gshape, gg)?);
                self.accumulate(grads, *beta, Tensor::new(bshape, gbt)?);
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let d = *y.shape().last().unwrap();
                let mut out = vec![0.0; y.numel()];
                for ((yr, gr), o) in y.data().chunks(d).zip(g.data().chunks(d)).zip(out.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        o[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Sigmoid(a) => {
                let t = node.value.zip_map(g, |y, gv| gv * y * (1.0 - y))?;
                self.accumulate(grads, *a, t);
            }
            Op::Gelu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(&node.aux)
                    .zip(g.data())
                    .map(|((&v, &cdf), &gv)| gv * (cdf + v * math::normal_pdf(v)))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(x.shape().to_vec(), data)?);
            }
        }
        Ok(())
    }
}

fn transpose_data(d: &[f64], batch: usize, r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let (src, dst) = (&d[b * r * c..(b + 1) * r * c], &mut out[b * r * c..(b + 1) * r * c]);
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    out
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Concat(..) => "concat",
        Op::Slice { .. } => "slice",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::MeanLast(..) => "mean_last",
        Op::LayerNorm { .. } => "layernorm",
        Op::Softmax(..) => "softmax",
        Op::Linear { .. } => "linear",
        Op::Sigmoid(..) => "sigmoid",
        Op::Gelu(..) => "gelu",
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`, over every coordinate of `x`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(1, |analytic_i|)`.
pub fn gradcheck<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.numel()).collect();
    gradcheck_coords(f, x, h, &coords)
}

/// [`gradcheck`] restricted to a subset of coordinates.
pub fn gradcheck_coords<F>(f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(invalid("gradcheck: step must lie in [1e-6, 1e-3]"));
    }
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(t)?;
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone())?;
    let out = f(&mut tape, v)?;
    if tape.value(out).numel() != 1 {
        return Err(invalid("gradcheck: function output is not a scalar"));
    }
    let grads = tape.backward(out)?;
    let zero = Tensor::zeros(x.shape().to_vec());
    let analytic = grads.get(v).unwrap_or(&zero);
    let mut worst: f64 = 0.0;
    for &i in coords {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = tape.constant(Tensor::eye(2)).unwrap();
        let c = tape.matmul(a, i).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0])).unwrap();
        let s = tape.softmax(a).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_two_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[2.0, 4.0])).unwrap();
        let g = tape.constant(Tensor::full([2], 1.0)).unwrap();
        let b = tape.constant(Tensor::zeros([2])).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        // mean 3, variance 1
        let expect = 1.0 / (1.0 + 1e-5f64).sqrt();
        let v = tape.value(y).data();
        assert!((v[0] + expect).abs() < 1e-15 && (v[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([2, 3])).unwrap();
        match tape.matmul(a, b) {
            Err(Error::ShapeMismatch { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!(lhs, [2, 3]);
                assert_eq!(rhs, [2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let c = tape.constant(Tensor::zeros([4])).unwrap();
        assert!(matches!(tape.add(a, c), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut tape = Tape::new();
        assert!(matches!(
            tape.constant(t(&[1], &[f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
        let a = tape.constant(t(&[1], &[1e300])).unwrap();
        assert!(matches!(tape.mul(a, a), Err(Error::NonFinite { op: "mul" })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = t(&[3], &[1.0, 2.0, 3.0]);
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone()).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0, 6.0]);
        let err = gradcheck(
            |tp, v| {
                let sq = tp.mul(v, v)?;
                tp.sum(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn fan_out_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0])).unwrap();
        let a = tape.scale(x, 2.0).unwrap();
        let b = tape.add(a, x).unwrap();
        let s = tape.sum(b).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let x = t(&[2], &[1.0, 2.0]);
        assert!(gradcheck(|tp, v| tp.scale(v, 2.0), &x, 1e-4).is_err());
        assert!(gradcheck(|tp, v| tp.sum(v), &x, 1e-2).is_err());
    }

    #[test]
    fn broadcast_mul_row_scale() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2, 2], &[1., 2., 3., 4., 5., 6., 7., 8.])).unwrap();
        let s = tape.constant(t(&[2, 2, 1], &[1., 0., 2., 10.])).unwrap();
        let y = tape.mul(x, s).unwrap();
        assert_eq!(tape.value(y).data(), &[1., 2., 0., 0., 10., 12., 70., 80.]);
        let mid = tape.constant(t(&[2, 1, 2], &[1., -1., 2., 0.])).unwrap();
        let z = tape.mul(x, mid).unwrap();
        assert_eq!(tape.value(z).data(), &[1., -2., 3., -4., 10., 0., 14., 0.]);
    }

    #[test]
    fn tape_reuse_does_not_grow() {
        let mut tape = Tape::new();
        let mut lens = Vec::new();
        for i in 0..1000 {
            let x = tape.leaf(Tensor::full([4], i as f64 * 1e-3)).unwrap();
            let y = tape.gelu(x).unwrap();
            let s = tape.sum(y).unwrap();
            let _ = tape.backward(s).unwrap();
            lens.push(tape.len());
            tape.clear();
            assert!(tape.is_empty());
        }
        assert!(lens.iter().all(|&l| l == lens[0]));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mut rng = seeded(3);
        let a = Tensor::randn([5, 7], 1.0, &mut rng);
        let b = Tensor::randn([7, 3], 1.0, &mut rng);
        let run = || {
            let mut tape = Tape::new();
            let va = tape.constant(a.clone()).unwrap();
            let vb = tape.constant(b.clone()).unwrap();
            let m = tape.matmul(va, vb).unwrap();
            let s = tape.softmax(m).unwrap();
            tape.value(s).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
