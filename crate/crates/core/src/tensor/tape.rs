//! Reverse-mode automatic differentiation over a linear operation record.
//!
//! A [`Tape`] owns every value produced while building a graph. Operations
//! append a node whose inputs are already on the tape, so recording order is
//! a topological order and [`Tape::backward`] replays it in reverse.

use std::collections::HashMap;

use super::kernels::{matmul_into, matmul_nt_into, matmul_tn_into};
use super::params::{ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate gradient bugs used to prove that the gradient checker detects them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    SigmoidGradSignFlip,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Reshape(Var),
    Gather { table: Var, ids: Vec<usize> },
    Pick { x: Var, ids: Vec<usize> },
    ExpandMid { x: Var, times: usize },
    WeightedSum { weights: Var, items: Var },
    Sum(Var),
    Floor { x: Var, floor: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("grad shape"))
    }

    pub fn slice(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

/// Operation record plus the values of every node.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    track_params: bool,
    clamp_count: usize,
    fault: Option<Fault>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_leading(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len() && a[..a.len() - 1] == b[..b.len() - 1]
}

/// `b` broadcasts onto `a` when it matches `a`, is a scalar, or equals a
/// trailing suffix of `a`'s shape (one row repeated over leading axes).
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let blen: usize = b.iter().product();
    if a == b || blen == 1 {
        return true;
    }
    let b_trim: Vec<usize> = b.iter().copied().skip_while(|&d| d == 1).collect();
    b_trim.len() <= a.len() && a[a.len() - b_trim.len()..] == b_trim[..]
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track_params: true,
            clamp_count: 0,
            fault: None,
        }
    }

    /// A tape whose parameters are recorded as constants. Used for inference.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    pub fn with_fault(mut self, fault: Fault) -> Self {
        self.fault = Some(fault);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of log-probabilities clamped by [`Tape::floor`].
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    /// Which side of each non-differentiable point the relu and floor inputs
    /// fall on. Two evaluations with equal patterns lie on the same smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].value.data().iter().map(|&v| v > T::zero())),
                Op::Floor { x, floor } => out.extend(self.nodes[x.0].value.data().iter().map(|&v| v < floor)),
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records (once per tape) the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, self.track_params);
        self.params.insert(id, v);
        v
    }

    /// Parameter gradients of a backward pass, in `ParamStore` order.
    pub fn param_grads(&self, store: &ParamStore<T>, grads: &Gradients<T>) -> Vec<Option<Tensor<T>>> {
        (0..store.len())
            .map(|i| {
                self.params
                    .get(&ParamId(i))
                    .and_then(|&v| grads.get(v))
            })
            .collect()
    }

    // ---- binary ops -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatMul(a, b), rg))
    }

    /// Batched product of rank-3 tensors: `[B,m,k]·[B,k,n]`, or `[B,m,k]·[B,n,k]ᵀ`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok = sa.len() == 3
            && sb.len() == 3
            && sa[0] == sb[0]
            && if transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(Error::shape("batch_matmul", sa, sb));
        }
        let (bs, m, k) = (sa[0], sa[1], sa[2]);
        let n = if transpose_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); bs * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..bs {
            let ai = &ad[i * m * k..(i + 1) * m * k];
            let bi = &bd[i * k * n..(i + 1) * k * n];
            let ci = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                matmul_nt_into(ai, bi, ci, m, k, n);
            } else {
                matmul_into(ai, bi, ci, m, k, n);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor { shape: vec![bs, m, n], data: out },
            Op::BatchMatMul { a, b, transpose_b },
            rg,
        ))
    }

    fn zip_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::shape(name, sa, sb));
        }
        let shape = sa.to_vec();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let bl = bd.len();
        let data = if bl == 1 {
            ad.iter().map(|&x| f(x, bd[0])).collect()
        } else {
            ad.chunks(bl)
                .flat_map(|chunk| chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor { shape, data }, op, rg))
    }

    /// Elementwise sum; `b` may be a scalar or a row broadcast over `a`'s leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_broadcast("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`, with constant scale and shift.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.map_value(x, |v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -T::one(), T::one())
    }

    /// `gate ⊙ a + (1 − gate) ⊙ b`
    pub fn blend(&mut self, gate: Var, a: Var, b: Var) -> Result<Var> {
        let ga = self.mul(gate, a)?;
        let inv = self.one_minus(gate);
        let gb = self.mul(inv, b)?;
        self.add(ga, gb)
    }

    /// `Σ_i w_i · x_i` over same-shape tensors with constant weights.
    pub fn weighted_sum(&mut self, terms: &[(T, Var)]) -> Result<Var> {
        let (&(w0, x0), rest) = terms
            .split_first()
            .ok_or(Error::EmptyAxis { op: "weighted_sum" })?;
        let mut acc = self.scale(x0, w0);
        for &(w, x) in rest {
            let sx = self.scale(x, w);
            if self.shape(sx) != self.shape(acc) {
                return Err(Error::shape("weighted_sum", self.shape(acc), self.shape(sx)));
            }
            acc = self.add(acc, sx)?;
        }
        Ok(acc)
    }

    // ---- unary ops --------------------------------------------------------

    fn map_value(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = self.value(x);
        Tensor {
            shape: v.shape().to_vec(),
            data: v.data().iter().map(|&e| f(e)).collect(),
        }
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map_value(x, |v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map_value(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map_value(x, |v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_row(row);
        }
        let value = Tensor { shape: v.shape().to_vec(), data: out };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Softmax over the last axis restricted to positions where `keep` is true;
    /// excluded positions get exactly zero weight. `keep` has one flag per
    /// element of `x`.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let v = self.value(x);
        if keep.len() != v.len() {
            return Err(Error::shape("masked_softmax", v.shape(), &[keep.len()]));
        }
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for (row, mask) in out.chunks_mut(n).zip(keep.chunks(n)) {
            if !mask.iter().any(|&k| k) {
                return Err(Error::EmptyAxis { op: "masked_softmax" });
            }
            // Non-finite logits propagate as NaN rather than failing here.
            let mut max = T::neg_infinity();
            for (&e, &k) in row.iter().zip(mask) {
                if k && !(e <= max) {
                    max = e;
                }
            }
            let mut sum = T::zero();
            for (e, &k) in row.iter_mut().zip(mask) {
                *e = if k { (*e - max).exp() } else { T::zero() };
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let value = Tensor { shape: v.shape().to_vec(), data: out };
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
            let lse = row.iter().map(|&e| (e - max).exp()).sum::<T>().ln() + max;
            for e in row.iter_mut() {
                *e -= lse;
            }
        }
        let value = Tensor { shape: v.shape().to_vec(), data: out };
        let rg = self.rg(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Elementwise `max(x, floor)`; values below the floor are counted and
    /// receive no gradient.
    pub fn floor(&mut self, x: Var, floor: T) -> Var {
        let clamped = self.value(x).data().iter().filter(|&&v| v < floor).count();
        self.clamp_count += clamped;
        let value = self.map_value(x, |v| if v < floor { floor } else { v });
        let rg = self.rg(&[x]);
        self.push(value, Op::Floor { x, floor }, rg)
    }

    // ---- structural ops ---------------------------------------------------

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        let lead = self.shape(first).to_vec();
        for &p in &parts[1..] {
            if !same_leading(&lead, self.shape(p)) {
                return Err(Error::shape("concat", &lead, self.shape(p)));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let rows = self.value(first).rows();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        *shape.last_mut().expect("rank >= 1") = total;
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape, data: out }, Op::Concat(parts.to_vec()), rg))
    }

    /// Slice `[start, start+len)` of the last axis.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        if len == 0 || start + len > n {
            return Err(Error::shape("narrow", v.shape(), &[start, len]));
        }
        let mut out = Vec::with_capacity(v.rows() * len);
        for row in v.data().chunks(n) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = len;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor { shape, data: out }, Op::Narrow { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Row lookup: `table[V,d]`, ids → `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::shape("gather", t.shape(), &[ids.len()]));
        }
        let d = t.last_dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data: out },
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// One element per row: `x[rows, n]`, ids → `[rows]`.
    pub fn pick(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let n = v.last_dim();
        if ids.len() != v.rows() || ids.iter().any(|&i| i >= n) {
            return Err(Error::shape("pick", v.shape(), &[ids.len()]));
        }
        let out: Vec<T> = ids.iter().enumerate().map(|(r, &i)| v.data()[r * n + i]).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor { shape: vec![ids.len()], data: out },
            Op::Pick { x, ids: ids.to_vec() },
            rg,
        ))
    }

    /// `[B, a]` → `[B, times, a]` by repetition along a new middle axis.
    pub fn expand_mid(&mut self, x: Var, times: usize) -> Result<Var> {
        let v = self.value(x);
        if v.shape().len() != 2 || times == 0 {
            return Err(Error::shape("expand_mid", v.shape(), &[times]));
        }
        let (b, a) = (v.shape()[0], v.shape()[1]);
        let mut out = Vec::with_capacity(b * times * a);
        for row in v.data().chunks(a) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor { shape: vec![b, times, a], data: out },
            Op::ExpandMid { x, times },
            rg,
        ))
    }

    /// Per-batch convex read: `weights[B,n]`, `items[B,n,d]` → `[B,d]`.
    pub fn weighted_rows(&mut self, weights: Var, items: Var) -> Result<Var> {
        let (sw, si) = (self.shape(weights), self.shape(items));
        if sw.len() != 2 || si.len() != 3 || sw[0] != si[0] || sw[1] != si[1] {
            return Err(Error::shape("weighted_rows", sw, si));
        }
        let (b, n, d) = (si[0], si[1], si[2]);
        let (wd, id) = (self.value(weights).data(), self.value(items).data());
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            let o = &mut out[bi * d..(bi + 1) * d];
            for j in 0..n {
                let w = wd[bi * n + j];
                let row = &id[(bi * n + j) * d..(bi * n + j + 1) * d];
                for (oe, &re) in o.iter_mut().zip(row) {
                    *oe += w * re;
                }
            }
        }
        let rg = self.rg(&[weights, items]);
        Ok(self.push(
            Tensor { shape: vec![b, d], data: out },
            Op::WeightedSum { weights, items },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    // ---- backward ---------------------------------------------------------

    /// Gradients of a scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes[..=loss.0]
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads, shapes })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.slot(grads, a) {
                    matmul_nt_into(g, self.value(b).data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, b) {
                    matmul_tn_into(self.value(a).data(), g, gb, m, k, n);
                }
            }
            &Op::BatchMatMul { a, b, transpose_b } => {
                let (sa, sb) = (self.shape(a), self.shape(b));
                let (bs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if transpose_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if let Some(ga) = self.slot(grads, a) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let bt = &bd[t * k * n..(t + 1) * k * n];
                        let gat = &mut ga[t * m * k..(t + 1) * m * k];
                        if transpose_b {
                            // C = A·Bᵀ, B is [n,k]: dA = dC·B
                            matmul_into(gt, bt, gat, m, n, k);
                        } else {
                            matmul_nt_into(gt, bt, gat, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for t in 0..bs {
                        let gt = &g[t * m * n..(t + 1) * m * n];
                        let at = &ad[t * m * k..(t + 1) * m * k];
                        let gbt = &mut gb[t * k * n..(t + 1) * k * n];
                        if transpose_b {
                            // dB[n,k] = dCᵀ·A
                            matmul_tn_into(gt, at, gbt, m, n, k);
                        } else {
                            matmul_tn_into(at, gt, gbt, m, k, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) | &Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if let Some(ga) = self.slot(grads, a) {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += d;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    let bl = gb.len();
                    for chunk in g.chunks(bl) {
                        for (e, &d) in gb.iter_mut().zip(chunk) {
                            *e += sign * d;
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                let bl = bd.len();
                if let Some(ga) = self.slot(grads, a) {
                    for (ga_c, g_c) in ga.chunks_mut(bl).zip(g.chunks(bl)) {
                        for ((x, &d), &bv) in ga_c.iter_mut().zip(g_c).zip(bd) {
                            *x += d * bv;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (g_c, a_c) in g.chunks(bl).zip(ad.chunks(bl)) {
                        for ((e, &d), &av) in gb.iter_mut().zip(g_c).zip(a_c) {
                            *e += d * av;
                        }
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(gx) = self.slot(grads, x) {
                    for (e, &d) in gx.iter_mut().zip(g) {
                        *e += scale * d;
                    }
                }
            }
            &Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for ((e, &d), &t) in gx.iter_mut().zip(g).zip(y) {
                        *e += d * (T::one() - t * t);
                    }
                }
            }
            &Op::Sigmoid(x) => {
                let sign = if self.fault == Some(Fault::SigmoidGradSignFlip) {
                    -T::one()
                } else {
                    T::one()
                };
                if let Some(gx) = self.slot(grads, x) {
                    for ((e, &d), &s) in gx.iter_mut().zip(g).zip(y) {
                        *e += sign * d * s * (T::one() - s);
                    }
                }
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                if let Some(gx) = self.slot(grads, x) {
                    for ((e, &d), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v > T::zero() {
                            *e += d;
                        }
                    }
                }
            }
            &Op::Softmax(x) | &Op::MaskedSoftmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, x) {
                    for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((e, &d), &p) in gxr.iter_mut().zip(gr).zip(yr) {
                            *e += p * (d - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmax(x) => {
                let n = node.value.last_dim();
                if let Some(gx) = self.slot(grads, x) {
                    for ((gr, yr), gxr) in g.chunks(n).zip(y.chunks(n)).zip(gx.chunks_mut(n)) {
                        let total: T = gr.iter().copied().sum();
                        for ((e, &d), &lp) in gxr.iter_mut().zip(gr).zip(yr) {
                            *e += d - lp.exp() * total;
                        }
                    }
                }
            }
            &Op::Floor { x, floor } => {
                let xd = self.value(x).data();
                if let Some(gx) = self.slot(grads, x) {
                    for ((e, &d), &v) in gx.iter_mut().zip(g).zip(xd) {
                        if v >= floor {
                            *e += d;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            for (e, &d) in gp[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *e += d;
                            }
                        }
                    }
                    offset += w;
                }
            }
            &Op::Narrow { x, start } => {
                let len = node.value.last_dim();
                let n = self.value(x).last_dim();
                if let Some(gx) = self.slot(grads, x) {
                    for (gr, gxr) in g.chunks(len).zip(gx.chunks_mut(n)) {
                        for (e, &d) in gxr[start..start + len].iter_mut().zip(gr) {
                            *e += d;
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for (e, &d) in gx.iter_mut().zip(g) {
                        *e += d;
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = node.value.last_dim();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (e, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *e += v;
                        }
                    }
                }
            }
            Op::Pick { x, ids } => {
                let n = self.value(*x).last_dim();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &id) in ids.iter().enumerate() {
                        gx[r * n + id] += g[r];
                    }
                }
            }
            &Op::ExpandMid { x, times } => {
                let a = node.value.last_dim();
                if let Some(gx) = self.slot(grads, x) {
                    for (r, gxr) in gx.chunks_mut(a).enumerate() {
                        for t in 0..times {
                            let src = &g[(r * times + t) * a..(r * times + t + 1) * a];
                            for (e, &d) in gxr.iter_mut().zip(src) {
                                *e += d;
                            }
                        }
                    }
                }
            }
            &Op::WeightedSum { weights, items } => {
                let si = self.shape(items);
                let (b, n, d) = (si[0], si[1], si[2]);
                let (wd, id) = (self.value(weights).data(), self.value(items).data());
                if let Some(gw) = self.slot(grads, weights) {
                    for bi in 0..b {
                        let go = &g[bi * d..(bi + 1) * d];
                        for j in 0..n {
                            let row = &id[(bi * n + j) * d..(bi * n + j + 1) * d];
                            gw[bi * n + j] += go.iter().zip(row).map(|(&x, &r)| x * r).sum::<T>();
                        }
                    }
                }
                if let Some(gi) = self.slot(grads, items) {
                    for bi in 0..b {
                        let go = &g[bi * d..(bi + 1) * d];
                        for j in 0..n {
                            let w = wd[bi * n + j];
                            let row = &mut gi[(bi * n + j) * d..(bi * n + j + 1) * d];
                            for (e, &x) in row.iter_mut().zip(go) {
                                *e += w * x;
                            }
                        }
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    for e in gx.iter_mut() {
                        *e += g[0];
                    }
                }
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &e| m.max(e));
    let mut sum = T::zero();
    for e in row.iter_mut() {
        *e = (*e - max).exp();
        sum += *e;
    }
    for e in row.iter_mut() {
        *e /= sum;
    }
}

#[cfg(test)]
#[path = "tape_tests.rs"]
mod tests;
