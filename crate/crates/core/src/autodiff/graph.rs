use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Real, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate corruption of a backward rule. Only used to prove that the
/// gradient checker catches broken derivatives.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fault {
    ScaleTanhGrad(f64),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    Pick { x: Var, idx: Vec<usize> },
    SelectRows { mask: Vec<bool>, a: Var, b: Var },
    TimeWeightedSum { weights: Var, seq: Var },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Affine(x, _)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Slice { x, .. }
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::Transpose(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Pick { x, .. } => vec![*x],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Gather { table, .. } => vec![*table],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::SelectRows { a, b, .. } => vec![*a, *b],
            Op::TimeWeightedSum { weights, seq } => vec![*weights, *seq],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    tensor: Tensor<T>,
    op: Op<T>,
}

/// Record of one forward computation.
#[derive(Debug)]
pub struct Graph<T = f64> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Numpy-style broadcasting of two shapes: per output dimension, the element
/// stride into each operand (zero where the operand is broadcast).
struct Broadcast {
    out: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
}

impl Broadcast {
    fn new(a: &[usize], b: &[usize]) -> Option<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            out.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return None,
            });
        }
        let strides = |p: &[usize]| -> Vec<usize> {
            let mut s = vec![0; rank];
            let mut acc = 1;
            for d in (0..rank).rev() {
                s[d] = if p[d] == 1 { 0 } else { acc };
                acc *= p[d];
            }
            s
        };
        Some(Self {
            stride_a: strides(&pa),
            stride_b: strides(&pb),
            out,
        })
    }

    /// Calls `f(out_index, a_index, b_index)` for every output element in
    /// row-major order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let inner = self.out[rank - 1];
        let (sa, sb) = (self.stride_a[rank - 1], self.stride_b[rank - 1]);
        let outer: usize = self.out[..rank - 1].iter().product();
        let mut counter = vec![0usize; rank - 1];
        let (mut base_a, mut base_b) = (0usize, 0usize);
        let mut o = 0;
        for _ in 0..outer {
            for k in 0..inner {
                f(o, base_a + k * sa, base_b + k * sb);
                o += 1;
            }
            for d in (0..rank - 1).rev() {
                counter[d] += 1;
                base_a += self.stride_a[d];
                base_b += self.stride_b[d];
                if counter[d] < self.out[d] {
                    break;
                }
                base_a -= self.stride_a[d] * self.out[d];
                base_b -= self.stride_b[d] * self.out[d];
                counter[d] = 0;
            }
        }
    }
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, numel: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Fault) {
        self.fault = Some(fault);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, tensor: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = match &op {
            Op::Leaf => tensor.requires_grad(),
            op => op.inputs().iter().any(|v| self.nodes[v.0].tensor.requires_grad()),
        };
        let tensor = tensor.with_requires_grad(requires_grad);
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf; it receives gradients iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor, Op::Leaf)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn values(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.tensor.zero_grad();
        }
    }

    /// Direct inputs of a node.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// All nodes reachable backwards from `v` without passing through any
    /// node in `stop` (stop nodes themselves are included).
    pub fn ancestors(&self, v: Var, stop: &[Var]) -> BTreeSet<Var> {
        let mut seen = BTreeSet::new();
        let mut todo = vec![v];
        while let Some(n) = todo.pop() {
            if !seen.insert(n) || stop.contains(&n) {
                continue;
            }
            todo.extend(self.inputs(n));
        }
        seen
    }

    // ---- forward operations ---------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.values(a), self.values(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = av[i * k + p];
                let brow = &bv[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b)))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let bc = Broadcast::new(sa, sb).ok_or_else(|| Error::Shape {
            op: name,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })?;
        let (av, bv) = (self.values(a), self.values(b));
        let out = if sa == sb {
            av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = vec![T::zero(); bc.out.iter().product()];
            bc.for_each(|o, ia, ib| out[o] = f(av[ia], bv[ib]));
            out
        };
        Ok(Tensor::from_parts(bc.out, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let src = self.value(x);
        let out = src.values().iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(t, Op::Affine(x, scale))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = src.values().iter().map(|&v| sigmoid(v)).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(t, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let out = src.values().iter().map(|&v| v.tanh()).collect();
        let t = Tensor::from_parts(src.shape().to_vec(), out);
        self.push(t, Op::Tanh(x))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::OutOfRange {
                op: "concat",
                index: axis,
                extent: base.len(),
            });
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base;
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let block = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.values(v)[o * block..(o + 1) * block]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::OutOfRange {
                op: "slice",
                index: axis,
                extent: s.len(),
            });
        }
        if start >= end || end > s[axis] {
            return Err(Error::OutOfRange {
                op: "slice",
                index: end,
                extent: s[axis],
            });
        }
        let (outer, ext, inner) = split_at_axis(&s, axis);
        let width = end - start;
        let src = self.values(x);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * ext + start) * inner;
            out.extend_from_slice(&src[from..from + width * inner]);
        }
        let mut shape = s;
        shape[axis] = width;
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice { x, axis, start }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.values(x).iter().fold(T::zero(), |acc, &v| acc + v);
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.values(x);
        let total = vals.iter().fold(T::zero(), |acc, &v| acc + v);
        let n = T::of(vals.len() as f64);
        self.push(Tensor::scalar(total / n), Op::Mean(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let t = Tensor::from_parts(shape.to_vec(), src.values().to_vec());
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[0], s[1]);
        let src = self.values(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(x)))
    }

    /// Rows `ids` of a `[V×E]` table, as `[ids.len()×E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: s.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::OutOfRange {
                op: "gather_rows",
                index: bad,
                extent: rows,
            });
        }
        if ids.is_empty() {
            return Err(Error::Invalid("gather_rows with no ids".into()));
        }
        let src = self.values(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&src[id * width..(id + 1) * width]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), width], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Normalizes over the last axis with population variance, then applies
    /// the per-feature `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        for v in [gain, bias] {
            if self.value(v).numel() != d {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: s.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        let (xv, gv, bv) = (self.values(x), self.values(gain), self.values(bias));
        let rows = xv.len() / d;
        let dn = T::of(d as f64);
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) / dn;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / dn;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for k in 0..d {
                let h = (row[k] - mean) * inv;
                xhat[r * d + k] = h;
                out[r * d + k] = h * gv[k] + bv[k];
            }
        }
        Ok(self.push(
            Tensor::from_parts(s, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last axis. Positions where `mask` is false get exactly
    /// zero probability; a row with every position masked is an error.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let xv = self.values(x);
        if let Some(m) = mask {
            if m.len() != xv.len() {
                return Err(Error::Shape {
                    op: "softmax",
                    lhs: s,
                    rhs: vec![m.len()],
                });
            }
        }
        let d = *s.last().unwrap_or(&1);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..xv.len() / d {
            let span = r * d..(r + 1) * d;
            let keep = |k: usize| mask.is_none_or(|m| m[r * d + k]);
            let row = &xv[span.clone()];
            let mut max = None::<T>;
            for (k, &v) in row.iter().enumerate() {
                if keep(k) {
                    max = Some(max.map_or(v, |m: T| m.max(v)));
                }
            }
            let max = max.ok_or(Error::AllMasked)?;
            let o = &mut out[span];
            let mut total = T::zero();
            for k in 0..d {
                if keep(k) {
                    o[k] = (row[k] - max).exp();
                    total = total + o[k];
                }
            }
            for v in o.iter_mut() {
                *v = *v / total;
            }
        }
        Ok(self.push(Tensor::from_parts(s, out), Op::Softmax(x)))
    }

    /// Log-softmax over the last axis (max-subtracted).
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let xv = self.values(x);
        let d = *s.last().unwrap_or(&1);
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..xv.len() / d {
            let row = &xv[r * d..(r + 1) * d];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let total = row.iter().fold(T::zero(), |a, &v| a + (v - max).exp());
            let lse = max + total.ln();
            for k in 0..d {
                out[r * d + k] = row[k] - lse;
            }
        }
        self.push(Tensor::from_parts(s, out), Op::LogSoftmax(x))
    }

    /// Picks column `idx[r]` of every row of a `[B×V]` matrix, giving `[B×1]`.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::Shape {
                op: "pick",
                lhs: s.to_vec(),
                rhs: vec![idx.len()],
            });
        }
        let cols = s[1];
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::OutOfRange {
                op: "pick",
                index: bad,
                extent: cols,
            });
        }
        let xv = self.values(x);
        let out = idx.iter().enumerate().map(|(r, &c)| xv[r * cols + c]).collect();
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), 1], out),
            Op::Pick { x, idx: idx.to_vec() },
        ))
    }

    /// Row-wise choice: row `r` comes from `a` where `mask[r]`, else from `b`.
    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.first() != Some(&mask.len()) {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        let width = self.value(a).numel() / mask.len();
        let (av, bv) = (self.values(a), self.values(b));
        let mut out = Vec::with_capacity(av.len());
        for (r, &m) in mask.iter().enumerate() {
            let src = if m { av } else { bv };
            out.extend_from_slice(&src[r * width..(r + 1) * width]);
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SelectRows {
                mask: mask.to_vec(),
                a,
                b,
            },
        ))
    }

    /// `out[b, :] = Σ_i weights[b, i] · seq[i, b, :]` for `weights: [B×N]`
    /// and a time-major `seq: [N×B×D]`, summed in increasing `i`.
    pub fn time_weighted_sum(&mut self, weights: Var, seq: Var) -> Result<Var> {
        let (sw, ss) = (self.shape(weights), self.shape(seq));
        if sw.len() != 2 || ss.len() != 3 || sw[0] != ss[1] || sw[1] != ss[0] {
            return Err(Error::Shape {
                op: "time_weighted_sum",
                lhs: sw.to_vec(),
                rhs: ss.to_vec(),
            });
        }
        let (n, b, d) = (ss[0], ss[1], ss[2]);
        let (wv, sv) = (self.values(weights), self.values(seq));
        let mut out = vec![T::zero(); b * d];
        for r in 0..b {
            let o = &mut out[r * d..(r + 1) * d];
            for i in 0..n {
                let w = wv[r * n + i];
                let row = &sv[(i * b + r) * d..(i * b + r + 1) * d];
                for (acc, &v) in o.iter_mut().zip(row) {
                    *acc = *acc + w * v;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, d], out),
            Op::TimeWeightedSum { weights, seq },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `∂loss/∂leaf` into every leaf that requires a gradient.
    /// Repeated calls add up until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = &self.nodes[loss.0].tensor;
        if root.numel() != 1 {
            return Err(Error::NonScalarLoss(root.shape().to_vec()));
        }
        if !root.requires_grad() {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let tanh_scale = match self.fault {
            Some(Fault::ScaleTanhGrad(s)) => T::of(s),
            None => T::one(),
        };
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tensor.requires_grad() || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads, tanh_scale);
        }
        for (i, g) in grads.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &self.nodes[i].op) {
                if self.nodes[i].tensor.requires_grad() {
                    self.nodes[i].tensor.accumulate_grad(&g);
                }
            }
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].tensor.numel()
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>], tanh_scale: T) {
        let out = &self.nodes[i].tensor;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.values(*a), self.values(*b));
                if self.needs(*a) {
                    let ga = grad_slot(grads, *a, m * k);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let dot = grow.iter().zip(brow).fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                            ga[r * k + p] = ga[r * k + p] + dot;
                        }
                    }
                }
                if self.needs(*b) {
                    let gb = grad_slot(grads, *b, k * n);
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            let dst = &mut gb[p * n..(p + 1) * n];
                            for (d, &y) in dst.iter_mut().zip(grow) {
                                *d = *d + x * y;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bc = Broadcast::new(self.shape(a), self.shape(b)).expect("checked in forward");
                let (av, bv) = (self.values(a), self.values(b));
                let (da, db): (T, T) = match &self.nodes[i].op {
                    Op::Sub(..) => (T::one(), -T::one()),
                    _ => (T::one(), T::one()),
                };
                let is_mul = matches!(self.nodes[i].op, Op::Mul(..));
                if self.needs(a) {
                    let ga = grad_slot(grads, a, av.len());
                    bc.for_each(|o, ia, ib| {
                        let d = if is_mul { bv[ib] } else { da };
                        ga[ia] = ga[ia] + g[o] * d;
                    });
                }
                if self.needs(b) {
                    let gb = grad_slot(grads, b, bv.len());
                    bc.for_each(|o, ia, ib| {
                        let d = if is_mul { av[ia] } else { db };
                        gb[ib] = gb[ib] + g[o] * d;
                    });
                }
            }
            Op::Affine(x, scale) => {
                let gx = grad_slot(grads, *x, g.len());
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d = *d + v * *scale;
                }
            }
            Op::Sigmoid(x) => {
                let gx = grad_slot(grads, *x, g.len());
                for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out.values()) {
                    *d = *d + v * y * (T::one() - y);
                }
            }
            Op::Tanh(x) => {
                let gx = grad_slot(grads, *x, g.len());
                for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out.values()) {
                    *d = *d + v * (T::one() - y * y) * tanh_scale;
                }
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_at_axis(out.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let ext = self.shape(v)[*axis];
                    if self.needs(v) {
                        let gv = grad_slot(grads, v, outer * ext * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            let dst = &mut gv[o * ext * inner..(o + 1) * ext * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + s;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, ext, inner) = split_at_axis(self.shape(*x), *axis);
                let width = out.shape()[*axis];
                let gx = grad_slot(grads, *x, outer * ext * inner);
                for o in 0..outer {
                    let from = (o * ext + start) * inner;
                    let dst = &mut gx[from..from + width * inner];
                    let src = &g[o * width * inner..(o + 1) * width * inner];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = self.numel(*x);
                let scale = match &self.nodes[i].op {
                    Op::Mean(_) => T::one() / T::of(n as f64),
                    _ => T::one(),
                };
                let gx = grad_slot(grads, *x, n);
                for d in gx.iter_mut() {
                    *d = *d + g[0] * scale;
                }
            }
            Op::Reshape(x) => {
                let gx = grad_slot(grads, *x, g.len());
                for (d, &v) in gx.iter_mut().zip(g) {
                    *d = *d + v;
                }
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                let gx = grad_slot(grads, *x, r * c);
                for a in 0..r {
                    for b in 0..c {
                        gx[a * c + b] = gx[a * c + b] + g[b * r + a];
                    }
                }
            }
            Op::Gather { table, ids } => {
                let width = self.shape(*table)[1];
                let gt = grad_slot(grads, *table, self.numel(*table));
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * width..(id + 1) * width];
                    for (d, &v) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *d = *d + v;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = self.numel(*gain);
                let gv = self.values(*gain);
                let rows = g.len() / d;
                if self.needs(*gain) {
                    let gg = grad_slot(grads, *gain, d);
                    for r in 0..rows {
                        for k in 0..d {
                            gg[k] = gg[k] + g[r * d + k] * xhat[r * d + k];
                        }
                    }
                }
                if self.needs(*bias) {
                    let gb = grad_slot(grads, *bias, d);
                    for r in 0..rows {
                        for k in 0..d {
                            gb[k] = gb[k] + g[r * d + k];
                        }
                    }
                }
                if self.needs(*x) {
                    let dn = T::of(d as f64);
                    let gx = grad_slot(grads, *x, g.len());
                    let mut gh = vec![T::zero(); d];
                    for r in 0..rows {
                        let span = r * d..(r + 1) * d;
                        let (xh, gr) = (&xhat[span.clone()], &g[span.clone()]);
                        let mut sum_gh = T::zero();
                        let mut sum_ghx = T::zero();
                        for k in 0..d {
                            gh[k] = gr[k] * gv[k];
                            sum_gh = sum_gh + gh[k];
                            sum_ghx = sum_ghx + gh[k] * xh[k];
                        }
                        let scale = inv_std[r] / dn;
                        for k in 0..d {
                            let v = scale * (dn * gh[k] - sum_gh - xh[k] * sum_ghx);
                            gx[r * d + k] = gx[r * d + k] + v;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let y = out.values();
                let d = *out.shape().last().unwrap_or(&1);
                let gx = grad_slot(grads, *x, y.len());
                for r in 0..y.len() / d {
                    let span = r * d..(r + 1) * d;
                    let dot = y[span.clone()]
                        .iter()
                        .zip(&g[span.clone()])
                        .fold(T::zero(), |a, (&p, &q)| a + p * q);
                    for k in span {
                        gx[k] = gx[k] + y[k] * (g[k] - dot);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let y = out.values();
                let d = *out.shape().last().unwrap_or(&1);
                let gx = grad_slot(grads, *x, y.len());
                for r in 0..y.len() / d {
                    let span = r * d..(r + 1) * d;
                    let total = g[span.clone()].iter().fold(T::zero(), |a, &v| a + v);
                    for k in span {
                        gx[k] = gx[k] + g[k] - y[k].exp() * total;
                    }
                }
            }
            Op::Pick { x, idx } => {
                let cols = self.shape(*x)[1];
                let gx = grad_slot(grads, *x, self.numel(*x));
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] = gx[r * cols + c] + g[r];
                }
            }
            Op::SelectRows { mask, a, b } => {
                let width = g.len() / mask.len();
                for (src, take) in [(*a, true), (*b, false)] {
                    if !self.needs(src) {
                        continue;
                    }
                    let gs = grad_slot(grads, src, g.len());
                    for (r, &m) in mask.iter().enumerate() {
                        if m == take {
                            for k in r * width..(r + 1) * width {
                                gs[k] = gs[k] + g[k];
                            }
                        }
                    }
                }
            }
            Op::TimeWeightedSum { weights, seq } => {
                let ss = self.shape(*seq);
                let (n, b, d) = (ss[0], ss[1], ss[2]);
                let (wv, sv) = (self.values(*weights), self.values(*seq));
                if self.needs(*weights) {
                    let gw = grad_slot(grads, *weights, b * n);
                    for r in 0..b {
                        let grow = &g[r * d..(r + 1) * d];
                        for i in 0..n {
                            let row = &sv[(i * b + r) * d..(i * b + r + 1) * d];
                            let dot = grow.iter().zip(row).fold(T::zero(), |a, (&p, &q)| a + p * q);
                            gw[r * n + i] = gw[r * n + i] + dot;
                        }
                    }
                }
                if self.needs(*seq) {
                    let gs = grad_slot(grads, *seq, n * b * d);
                    for r in 0..b {
                        let grow = &g[r * d..(r + 1) * d];
                        for i in 0..n {
                            let w = wv[r * n + i];
                            let dst = &mut gs[(i * b + r) * d..(i * b + r + 1) * d];
                            for (acc, &v) in dst.iter_mut().zip(grow) {
                                *acc = *acc + w * v;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::<f64>::new();
        let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let col = g.constant(t(&[2, 1], &[2.0, 3.0]));
        let out = g.matmul(eye, col).unwrap();
        assert_eq!(g.values(out), &[2.0, 3.0]);

        let row = g.constant(t(&[1, 2], &[1.0, 2.0]));
        let col = g.constant(t(&[2, 1], &[3.0, 4.0]));
        let out = g.matmul(row, col).unwrap();
        assert_eq!(g.values(out), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.zeros(&[2, 3]);
        let b = g.zeros(&[2, 3]);
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn nonlinearities_at_zero() {
        let mut g = Graph::<f64>::new();
        let z = g.zeros(&[1]);
        let s = g.sigmoid(z);
        let th = g.tanh(z);
        assert_eq!(g.values(s), &[0.5]);
        assert_eq!(g.values(th), &[0.0]);
    }

    #[test]
    fn concat_and_its_backward_split() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[2], &[1.0, 2.0]));
        let b = g.param(t(&[1], &[3.0]));
        let c = g.concat(&[a, b], 0).unwrap();
        assert_eq!(g.values(c), &[1.0, 2.0, 3.0]);
        let w = g.constant(t(&[3], &[10.0, 20.0, 30.0]));
        let p = g.mul(c, w).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[10.0, 20.0]);
        assert_eq!(g.grad(b).unwrap(), &[30.0]);
    }

    #[test]
    fn backward_of_sums() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[3], &[0.3, -1.0, 2.0]));
        let loss = g.sum(w);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_bad_roots() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(w), Err(Error::NonScalarLoss(vec![2])));
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let s = g.sum(c);
        assert_eq!(g.backward(s), Err(Error::Detached));
    }

    #[test]
    fn gradients_accumulate_until_zeroed() {
        let mut g = Graph::<f64>::new();
        let w = g.param(t(&[2], &[1.0, -2.0]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(w).unwrap(), &[4.0, -8.0]);
        g.zero_grad();
        assert!(g.grad(w).is_none());
    }

    #[test]
    fn broadcasting_rows_and_columns() {
        let mut g = Graph::<f64>::new();
        let m = g.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = g.param(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let col = g.param(t(&[2, 1], &[2.0, 3.0]));
        let a = g.add(m, row).unwrap();
        assert_eq!(g.values(a), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let b = g.mul(a, col).unwrap();
        assert_eq!(g.values(b), &[22.0, 44.0, 66.0, 42.0, 75.0, 108.0]);
        let loss = g.sum(b);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(row).unwrap(), &[5.0, 5.0, 5.0]);
        assert_eq!(g.grad(col).unwrap(), &[66.0, 75.0]);
        let bad = g.zeros(&[3, 2]);
        assert!(g.add(m, bad).is_err());
    }

    #[test]
    fn slice_range_is_checked() {
        let mut g = Graph::<f64>::new();
        let x = g.zeros(&[2, 4]);
        assert!(g.slice(x, 1, 1, 3).is_ok());
        assert!(g.slice(x, 1, 2, 5).is_err());
        assert!(g.slice(x, 2, 0, 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let gain = g.constant(t(&[3], &[1.0; 3]));
        let bias = g.constant(t(&[3], &[0.0; 3]));
        let y = g.layer_norm(x, gain, bias, 0.0).unwrap();
        let expected = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in g.values(y).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let flat = g.constant(t(&[3], &[5.0; 3]));
        let y = g.layer_norm(flat, gain, bias, 1e-5).unwrap();
        assert_eq!(g.values(y), &[0.0; 3]);
    }

    #[test]
    fn masked_softmax() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[1, 3], &[0.3, 5.0, -1.0]));
        let y = g.softmax(x, Some(&[true, false, true])).unwrap();
        let v = g.values(y);
        assert_eq!(v[1], 0.0);
        assert!((v[0] + v[2] - 1.0).abs() < 1e-15);
        assert_eq!(g.softmax(x, Some(&[false; 3])), Err(Error::AllMasked));
    }

    #[test]
    fn ancestors_stop_at_cut() {
        let mut g = Graph::<f64>::new();
        let a = g.param(t(&[1], &[1.0]));
        let b = g.tanh(a);
        let c = g.sigmoid(b);
        let all = g.ancestors(c, &[]);
        assert!(all.contains(&a));
        let cut = g.ancestors(c, &[b]);
        assert!(cut.contains(&b) && !cut.contains(&a));
    }
}
