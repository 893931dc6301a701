//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to [`Var`] handles together
//! with its forward value. [`Graph::backward`] walks the tape in reverse and
//! returns gradients for every parameter that was bound with
//! [`Graph::param`]. Graphs are single-use: build one per forward pass.

mod kernels;

use std::collections::HashMap;

use crate::error::{CovarError, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{inverse_permutation, numel, permute_into, Scalar, Tensor};

use kernels::*;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, ta: bool, tb: bool },
    Softmax(Var),
    LayerNorm { x: Var, rstd: Vec<S> },
    Gelu(Var),
    Silu(Var),
    Reshape(Var),
    Permute { x: Var, perm: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    GatherRows { table: Var, ids: Vec<usize> },
    Unfold1d { x: Var, kernel: usize, stride: usize, pad: usize },
    Upsample1d { x: Var, factor: usize },
    Sum(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    bound: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

/// Result of [`Graph::backward`]: parameter gradients plus gradients of any
/// leaves created with [`Graph::input`].
pub struct Backward<S> {
    pub params: Gradients<S>,
    inputs: HashMap<Var, Tensor<S>>,
}

impl<S: Scalar> Backward<S> {
    pub fn input(&self, v: Var) -> Option<&Tensor<S>> {
        self.inputs.get(&v)
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            bound: HashMap::new(),
            grad_enabled: true,
        }
    }

    /// A graph that records values only; `backward` yields nothing useful.
    pub fn inference(params: &'p ParamStore<S>) -> Self {
        let mut g = Self::new(params);
        g.grad_enabled = false;
        g
    }

    pub fn params(&self) -> &'p ParamStore<S> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf (no gradient).
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is reported by [`Backward::input`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a parameter; repeated calls reuse the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    fn binary(&mut self, a: Var, b: Var, kind: u8) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let f = |x: S, y: S| match kind {
            0 => x + y,
            1 => x - y,
            _ => x * y,
        };
        let out = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let bc = broadcast(ta.shape(), tb.shape())?;
            let (da, db) = (ta.data(), tb.data());
            let mut out = Vec::with_capacity(numel(&bc.out_shape));
            bcast_for_each(&bc, |_, ia, ib| out.push(f(da[ia], db[ib])));
            Tensor::new(bc.out_shape, out)?
        };
        let op = match kind {
            0 => Op::Add(a, b),
            1 => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    /// Broadcasting addition.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 1)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, 2)
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).map(|x| x + s);
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// `x[..., k] · w[k, n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(CovarError::Shape(format!(
                "linear: input {xs:?} incompatible with weight {ws:?}"
            )));
        }
        let (k, n) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(CovarError::Shape(format!(
                    "linear: bias {:?} for output width {n}",
                    self.shape(b)
                )));
            }
        }
        let rows = numel(&xs) / k.max(1);
        let y = linear_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            rows,
            k,
            n,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, y)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched matmul over a leading group axis: `[G,M,K]·[G,K,N] → [G,M,N]`,
    /// with either operand optionally stored transposed.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(CovarError::Shape(format!("bmm: {sa:?} x {sb:?}")));
        }
        let (m, k) = if ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
        let (k2, n) = if tb { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if k != k2 {
            return Err(CovarError::Shape(format!(
                "bmm: inner dims {k} vs {k2} ({sa:?} x {sb:?})"
            )));
        }
        let groups = sa[0];
        let mut out = vec![S::zero(); groups * m * n];
        bmm(
            self.value(a).data(),
            self.value(b).data(),
            groups,
            m,
            k,
            n,
            ta,
            tb,
            &mut out,
            S::zero(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::new(vec![groups, m, n], out)?,
            Op::Bmm { a, b, ta, tb },
            rg,
        ))
    }

    /// Softmax over the last axis. `-inf` entries get zero probability.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap_or(&1);
        let y = softmax_rows(t.data(), n);
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y).unwrap(), Op::Softmax(x), rg)
    }

    /// Parameter-free layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().unwrap_or(&1);
        let (y, rstd) = layer_norm_rows(t.data(), n, S::of(eps));
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, y).unwrap(), Op::LayerNorm { x, rstd }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(silu);
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(perm)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| CovarError::Shape("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(CovarError::Shape(format!("concat axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(CovarError::Shape(format!(
                    "concat: {s:?} incompatible with {base:?} on axis {axis}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let w = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(CovarError::Shape(format!(
                "narrow {start}..{} on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, d, inner) = split_axis(&s, axis);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Narrow { x, axis, start }, rg))
    }

    /// Rows of a `[V, C]` table selected by `ids`, shaped `[ids.len(), C]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(CovarError::Shape(format!("gather_rows on {s:?}")));
        }
        let (v, c) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(CovarError::Shape(format!("row id {bad} out of range {v}")));
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&data[i * c..(i + 1) * c]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Sliding windows along time: `[B,T,C] → [B,T_out,kernel·C]` with zero padding.
    pub fn unfold1d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || stride == 0 || s[1] + 2 * pad < kernel {
            return Err(CovarError::Shape(format!(
                "unfold1d(k={kernel}, s={stride}, p={pad}) on {s:?}"
            )));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let t_out = (t + 2 * pad - kernel) / stride + 1;
        let data = self.value(x).data();
        let mut out = vec![S::zero(); b * t_out * kernel * c];
        for bi in 0..b {
            for o in 0..t_out {
                for j in 0..kernel {
                    let src = (o * stride + j) as isize - pad as isize;
                    if src < 0 || src as usize >= t {
                        continue;
                    }
                    let src = (bi * t + src as usize) * c;
                    let dst = ((bi * t_out + o) * kernel + j) * c;
                    out[dst..dst + c].copy_from_slice(&data[src..src + c]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, t_out, kernel * c], out)?,
            Op::Unfold1d {
                x,
                kernel,
                stride,
                pad,
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling along time: `[B,T,C] → [B,T·factor,C]`.
    pub fn upsample1d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(CovarError::Shape(format!("upsample1d x{factor} on {s:?}")));
        }
        let (b, t, c) = (s[0], s[1], s[2]);
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(b * t * factor * c);
        for bi in 0..b {
            for ti in 0..t * factor {
                let src = (bi * t + ti / factor) * c;
                out.extend_from_slice(&data[src..src + c]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![b, t * factor, c], out)?,
            Op::Upsample1d { x, factor },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, S::one() / S::of(n as f64))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Backward<S>> {
        if self.value(loss).numel() != 1 {
            return Err(CovarError::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        let mut param_grads: Vec<Option<Tensor<S>>> =
            (0..self.params.len()).map(|_| None).collect();
        let mut inputs = HashMap::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    inputs.insert(Var(i), Tensor::new(node.value.shape().to_vec(), gy)?);
                }
                Op::Param(id) => {
                    param_grads[id.0] = Some(Tensor::new(node.value.shape().to_vec(), gy)?);
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(node.op, Op::Sub(..)) {
                        -S::one()
                    } else {
                        S::one()
                    };
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    if sa == sb {
                        if self.rg(*a) {
                            let ga = self.grad_buf(&mut grads, *a);
                            for (g, &d) in ga.iter_mut().zip(&gy) {
                                *g += d;
                            }
                        }
                        if self.rg(*b) {
                            let gb = self.grad_buf(&mut grads, *b);
                            for (g, &d) in gb.iter_mut().zip(&gy) {
                                *g += sign * d;
                            }
                        }
                    } else {
                        let bc = broadcast(&sa, &sb)?;
                        if self.rg(*a) {
                            let ga = self.grad_buf(&mut grads, *a);
                            bcast_for_each(&bc, |o, ia, _| ga[ia] += gy[o]);
                        }
                        if self.rg(*b) {
                            let gb = self.grad_buf(&mut grads, *b);
                            bcast_for_each(&bc, |o, _, ib| gb[ib] += sign * gy[o]);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let bc = broadcast(ta.shape(), tb.shape())?;
                    if self.rg(*a) {
                        let db = tb.data();
                        let ga = self.grad_buf(&mut grads, *a);
                        bcast_for_each(&bc, |o, ia, ib| ga[ia] += gy[o] * db[ib]);
                    }
                    if self.rg(*b) {
                        let da = ta.data();
                        let gb = self.grad_buf(&mut grads, *b);
                        bcast_for_each(&bc, |o, ia, ib| gb[ib] += gy[o] * da[ia]);
                    }
                }
                Op::Scale(a, s) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for (g, &d) in ga.iter_mut().zip(&gy) {
                        *g += *s * d;
                    }
                }
                Op::AddScalar(a) => {
                    let ga = self.grad_buf(&mut grads, *a);
                    for (g, &d) in ga.iter_mut().zip(&gy) {
                        *g += d;
                    }
                }
                Op::Linear { x, w, b } => {
                    let ws = self.shape(*w);
                    let (k, n) = (ws[0], ws[1]);
                    let rows = self.value(*x).numel() / k.max(1);
                    if self.rg(*x) {
                        let wd = self.value(*w).data();
                        let gx = self.grad_buf(&mut grads, *x);
                        linear_backward_input(&gy, wd, rows, k, n, gx);
                    }
                    if self.rg(*w) {
                        let xd = self.value(*x).data();
                        let gw = self.grad_buf(&mut grads, *w);
                        crate::tensor::gemm(
                            k,
                            rows,
                            n,
                            S::one(),
                            crate::tensor::MatRef { data: xd, trans: true },
                            crate::tensor::MatRef { data: &gy, trans: false },
                            S::one(),
                            gw,
                        );
                    }
                    if let Some(b) = b {
                        if self.rg(*b) {
                            let gb = self.grad_buf(&mut grads, *b);
                            for row in gy.chunks(n) {
                                for (g, &d) in gb.iter_mut().zip(row) {
                                    *g += d;
                                }
                            }
                        }
                    }
                }
                Op::Bmm { a, b, ta, tb } => {
                    let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                    let groups = sa[0];
                    let (m, k) = if *ta { (sa[2], sa[1]) } else { (sa[1], sa[2]) };
                    let n = if *tb { sb[1] } else { sb[2] };
                    if self.rg(*a) {
                        let bd = self.value(*b).data();
                        let ga = self.grad_buf(&mut grads, *a);
                        if !*ta {
                            // dA (m×k) = dC · op(B)ᵀ
                            bmm(&gy, bd, groups, m, n, k, false, !*tb, ga, S::one());
                        } else {
                            // dA (k×m) = op(B) · dCᵀ
                            bmm(bd, &gy, groups, k, n, m, *tb, true, ga, S::one());
                        }
                    }
                    if self.rg(*b) {
                        let ad = self.value(*a).data();
                        let gb = self.grad_buf(&mut grads, *b);
                        if !*tb {
                            // dB (k×n) = op(A)ᵀ · dC
                            bmm(ad, &gy, groups, k, m, n, !*ta, false, gb, S::one());
                        } else {
                            // dB (n×k) = dCᵀ · op(A)
                            bmm(&gy, ad, groups, n, m, k, true, *ta, gb, S::one());
                        }
                    }
                }
                Op::Softmax(x) => {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let y = node.value.data();
                    let gx = self.grad_buf(&mut grads, *x);
                    softmax_rows_backward(y, &gy, n, gx);
                }
                Op::LayerNorm { x, rstd } => {
                    let n = *node.value.shape().last().unwrap_or(&1);
                    let y = node.value.data();
                    let gx = self.grad_buf(&mut grads, *x);
                    layer_norm_rows_backward(y, rstd, &gy, n, gx);
                }
                Op::Gelu(x) => {
                    let xd = self.value(*x).data();
                    let gx = self.grad_buf(&mut grads, *x);
                    for ((g, &d), &v) in gx.iter_mut().zip(&gy).zip(xd) {
                        *g += d * gelu_grad(v);
                    }
                }
                Op::Silu(x) => {
                    let xd = self.value(*x).data();
                    let gx = self.grad_buf(&mut grads, *x);
                    for ((g, &d), &v) in gx.iter_mut().zip(&gy).zip(xd) {
                        *g += d * silu_grad(v);
                    }
                }
                Op::Reshape(x) => {
                    let gx = self.grad_buf(&mut grads, *x);
                    for (g, &d) in gx.iter_mut().zip(&gy) {
                        *g += d;
                    }
                }
                Op::Permute { x, perm } => {
                    let inv = inverse_permutation(perm);
                    let mut back = vec![S::zero(); gy.len()];
                    permute_into(&gy, node.value.shape(), &inv, &mut back);
                    let gx = self.grad_buf(&mut grads, *x);
                    for (g, &d) in gx.iter_mut().zip(&back) {
                        *g += d;
                    }
                }
                Op::Concat { parts, axis } => {
                    let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &p in parts {
                        let d = self.shape(p)[*axis];
                        if self.rg(p) {
                            let gp = self.grad_buf(&mut grads, p);
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * d * inner;
                                for (g, &v) in gp[dst..dst + d * inner]
                                    .iter_mut()
                                    .zip(&gy[src..src + d * inner])
                                {
                                    *g += v;
                                }
                            }
                        }
                        offset += d;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let len = node.value.shape()[*axis];
                    let (outer, d, inner) = split_axis(self.shape(*x), *axis);
                    let gx = self.grad_buf(&mut grads, *x);
                    for o in 0..outer {
                        let dst = o * d * inner + start * inner;
                        let src = o * len * inner;
                        for (g, &v) in gx[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&gy[src..src + len * inner])
                        {
                            *g += v;
                        }
                    }
                }
                Op::GatherRows { table, ids } => {
                    let c = self.shape(*table)[1];
                    let gt = self.grad_buf(&mut grads, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for (g, &v) in gt[id * c..(id + 1) * c].iter_mut().zip(&gy[r * c..]) {
                            *g += v;
                        }
                    }
                }
                Op::Unfold1d {
                    x,
                    kernel,
                    stride,
                    pad,
                } => {
                    let s = self.shape(*x).to_vec();
                    let (b, t, c) = (s[0], s[1], s[2]);
                    let t_out = node.value.shape()[1];
                    let gx = self.grad_buf(&mut grads, *x);
                    for bi in 0..b {
                        for o in 0..t_out {
                            for j in 0..*kernel {
                                let src = (o * stride + j) as isize - *pad as isize;
                                if src < 0 || src as usize >= t {
                                    continue;
                                }
                                let dst = (bi * t + src as usize) * c;
                                let from = ((bi * t_out + o) * kernel + j) * c;
                                for (g, &v) in gx[dst..dst + c].iter_mut().zip(&gy[from..from + c])
                                {
                                    *g += v;
                                }
                            }
                        }
                    }
                }
                Op::Upsample1d { x, factor } => {
                    let s = self.shape(*x).to_vec();
                    let (b, t, c) = (s[0], s[1], s[2]);
                    let gx = self.grad_buf(&mut grads, *x);
                    for bi in 0..b {
                        for ti in 0..t * factor {
                            let dst = (bi * t + ti / factor) * c;
                            let src = (bi * t * factor + ti) * c;
                            for (g, &v) in gx[dst..dst + c].iter_mut().zip(&gy[src..src + c]) {
                                *g += v;
                            }
                        }
                    }
                }
                Op::Sum(x) => {
                    let d = gy[0];
                    let gx = self.grad_buf(&mut grads, *x);
                    for g in gx.iter_mut() {
                        *g += d;
                    }
                }
            }
        }
        Ok(Backward {
            params: Gradients::new(param_grads),
            inputs,
        })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> &'g mut [S] {
        let n = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![S::zero(); n])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::randn(shape.to_vec(), rng)
    }

    /// Checks d(sum(f(x) * probe))/dx against central differences.
    fn check_input_grad(
        shape: &[usize],
        f: impl Fn(&mut Graph<'_, f64>, Var) -> Var,
        seed: u64,
    ) {
        let store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = randn(shape, &mut rng);
        let eval = |x: &Tensor<f64>, probe: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Option<Tensor<f64>>) {
            let mut g = Graph::new(&store);
            let xv = g.input(x.clone());
            let y = f(&mut g, xv);
            let probe = probe.cloned().unwrap_or_else(|| {
                let mut r = ChaCha8Rng::seed_from_u64(seed + 1);
                Tensor::randn(g.shape(y).to_vec(), &mut r)
            });
            let pv = g.constant(probe.clone());
            let m = g.mul(y, pv).unwrap();
            let l = g.sum(m);
            let val = g.value(l).data()[0];
            let bw = g.backward(l).unwrap();
            (val, probe, bw.input(xv).cloned())
        };
        let (_, probe, grad) = eval(&x0, None);
        let grad = grad.expect("input gradient");
        let h = 1e-5;
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp, Some(&probe)).0 - eval(&xm, Some(&probe)).0) / (2.0 * h);
            let an = grad.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {i}: analytic {an} vs numeric {fd}"
            );
        }
    }

    #[test]
    fn grad_elementwise_and_broadcast() {
        check_input_grad(&[2, 3, 4], |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(9);
            let c = g.constant(Tensor::randn(vec![1, 3, 1], &mut r));
            let a = g.mul(x, c).unwrap();
            let b = g.add(a, x).unwrap();
            let s = g.sub(b, c).unwrap();
            let sq = g.mul(s, s).unwrap();
            g.add_scalar(sq, 0.5)
        }, 1);
    }

    #[test]
    fn grad_broadcast_operand_side() {
        check_input_grad(&[3, 1], |g, x| {
            let mut r = ChaCha8Rng::seed_from_u64(4);
            let big = g.constant(Tensor::randn(vec![2, 3, 5], &mut r));
            let a = g.mul(big, x).unwrap();
            g.sub(big, a).unwrap()
        }, 2);
    }

    #[test]
    fn grad_softmax_layernorm_activations() {
        check_input_grad(&[3, 5], |g, x| {
            let s = g.softmax(x);
            let l = g.layer_norm(x, 1e-5);
            let a = g.gelu(l);
            let b = g.silu(x);
            let c = g.add(s, a).unwrap();
            g.add(c, b).unwrap()
        }, 3);
    }

    #[test]
    fn grad_linear_and_bmm() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = randn(&[4, 3], &mut rng);
        let bias = randn(&[3], &mut rng);
        let other = randn(&[2, 5, 4], &mut rng);
        check_input_grad(&[2, 5, 4], |g, x| {
            let wv = g.constant(w.clone());
            let bv = g.constant(bias.clone());
            let y = g.linear(x, wv, Some(bv)).unwrap();
            let o = g.constant(other.clone());
            let s1 = g.bmm(x, o, false, true).unwrap(); // [2,5,5]
            let s2 = g.bmm(x, x, true, false).unwrap(); // [2,4,4]
            let s3 = g.bmm(o, x, true, false).unwrap(); // [2,4,4]
            let s4 = g.bmm(s1, x, true, false).unwrap(); // [2,5,4]
            let a = g.sum(s2);
            let b = g.sum(s3);
            let c = g.mul(a, b).unwrap();
            let d = g.linear(s4, wv, None).unwrap();
            let e = g.add(y, d).unwrap();
            g.mul(e, c).unwrap()
        }, 6);
    }

    #[test]
    fn grad_shape_ops() {
        check_input_grad(&[2, 6, 3], |g, x| {
            let p = g.permute(x, &[2, 0, 1]).unwrap();
            let r = g.reshape(p, &[3, 12]).unwrap();
            let n = g.narrow(r, 1, 2, 7).unwrap();
            let back = g.reshape(x, &[3, 12]).unwrap();
            let n2 = g.narrow(back, 1, 0, 5).unwrap();
            let c = g.concat(&[n, n2, n], 1).unwrap();
            let s = g.scale(c, 1.5);
            let u = g.unfold1d(x, 3, 2, 1).unwrap();
            let up = g.upsample1d(x, 2).unwrap();
            let su = g.sum(u);
            let sp = g.mean(up);
            let k = g.mul(su, sp).unwrap();
            g.mul(s, k).unwrap()
        }, 7);
    }

    #[test]
    fn gather_rows_accumulates_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let id = store.add("table", &[4, 2], Init::TruncNormal(1.0), &mut rng);
        let mut g = Graph::new(&store);
        let t = g.param(id);
        let rows = g.gather_rows(t, &[1, 3, 1]).unwrap();
        let s = g.sum(rows);
        let bw = g.backward(s).unwrap();
        assert_eq!(
            bw.params.get(id).unwrap().data(),
            &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 1.0, 1.0]
        );
        assert!(g.gather_rows(t, &[4]).is_err());
    }

    #[test]
    fn unfold_zero_pads_edges() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::new([1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let u = g.unfold1d(x, 3, 2, 1).unwrap();
        assert_eq!(g.shape(u), &[1, 2, 3]);
        assert_eq!(g.value(u).data(), &[0.0, 1.0, 2.0, 2.0, 3.0, 4.0]);
    }
}
