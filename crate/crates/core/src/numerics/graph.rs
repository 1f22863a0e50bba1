//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a topological
//! order and `backward` is a single reverse sweep. Nodes that do not depend on
//! any gradient-requiring leaf carry no backward work.

use std::sync::Arc;

use crate::error::{OmniError, Result};
use crate::numerics::kernels::{self, Mask};
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds, used for fault injection in gradient-check negative controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    Mul,
    Scale,
    Silu,
    RmsNorm,
    Embedding,
    Rope,
    Attention,
    Softmax,
    SelectRows,
    ConcatRows,
    CrossEntropy,
    Sum,
    Custom,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Rope { x: Var, heads: usize, positions: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, heads: usize, mask: Arc<Mask>, probs: Vec<T> },
    Softmax(Var),
    SelectRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Sum(Var),
    Custom { x: Var, grad: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Silu(..) => OpKind::Silu,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Embedding { .. } => OpKind::Embedding,
            Op::Rope { .. } => OpKind::Rope,
            Op::Attention { .. } => OpKind::Attention,
            Op::Softmax(..) => OpKind::Softmax,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::ConcatRows(..) => OpKind::ConcatRows,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Sum(..) => OpKind::Sum,
            Op::Custom { .. } => OpKind::Custom,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
    fault: Option<OpKind>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn two_d(op: &'static str, t: &[usize]) -> Result<(usize, usize)> {
    match t {
        [r, c] => Ok((*r, *c)),
        _ => Err(OmniError::dim(op, t, &[0, 0])),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
            fault: None,
        }
    }

    /// Makes the backward rule of `kind` deliberately wrong (scaled by 1.5).
    /// Exists so gradient checks can demonstrate that they catch broken rules.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward pass with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    /// Clears gradients so that `backward` may run again over the same graph.
    pub fn reset(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.consumed = false;
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = two_d("matmul", self.shape(a))?;
        let (k2, n) = two_d("matmul", self.shape(b))?;
        if k != k2 {
            return Err(OmniError::dim("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a).data(), m, k, self.value(b).data(), n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(OmniError::dim("add", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds the vector `bias: [n]` to every row of `x: [m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = two_d("add_bias", self.shape(x))?;
        if self.value(bias).len() != n {
            return Err(OmniError::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(OmniError::dim("mul", self.shape(a), self.shape(b)));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| kernels::silu(e)).collect())
            .expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Silu(x), rg)
    }

    /// Root-mean-square normalization of each row with a learned gain `[n]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (m, n) = two_d("rms_norm", self.shape(x))?;
        if self.value(gain).len() != n {
            return Err(OmniError::dim("rms_norm", self.shape(x), self.shape(gain)));
        }
        let mut out = vec![T::zero(); m * n];
        let inv_rms = kernels::rms_norm(self.value(x).data(), n, self.value(gain).data(), &mut out);
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    /// Gathers rows of `table: [V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = two_d("embedding", self.shape(table))?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(OmniError::TokenOutOfRange {
                    id: id as u32,
                    total: vocab as u32,
                });
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(ids.len(), d, data)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn rope(&mut self, x: Var, heads: usize, positions: &[usize]) -> Result<Var> {
        let (m, d) = two_d("rope", self.shape(x))?;
        if positions.len() != m || d % heads != 0 || (d / heads) % 2 != 0 {
            return Err(OmniError::dim("rope", self.shape(x), &[positions.len(), heads]));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::rope(&mut data, d, heads, positions, false);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(m, d, data)?,
            Op::Rope {
                x,
                heads,
                positions: positions.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head masked scaled dot-product attention; every query row must see
    /// at least one key.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Arc<Mask>) -> Result<Var> {
        let (lq, d) = two_d("attention", self.shape(q))?;
        let (lk, dk) = two_d("attention", self.shape(k))?;
        if dk != d || self.shape(v) != self.shape(k) || heads == 0 || d % heads != 0 {
            return Err(OmniError::dim("attention", self.shape(q), self.shape(k)));
        }
        if mask.queries != lq || mask.keys != lk {
            return Err(OmniError::dim("attention mask", &[lq, lk], &[mask.queries, mask.keys]));
        }
        if let Some(row) = mask.first_empty_row() {
            return Err(OmniError::Config(format!("attention query row {row} has no visible key")));
        }
        let (out, probs) = kernels::attention(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            d,
            heads,
            &mask,
        );
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::matrix(lq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).softmax()?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (m, d) = two_d("select_rows", self.shape(x))?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= m {
                return Err(OmniError::dim("select_rows", &[m, d], &[r]));
            }
            data.extend_from_slice(self.value(x).row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::matrix(rows.len(), d, data)?,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => two_d("concat_rows", self.shape(p))?.1,
            None => return Err(OmniError::Graph("concat of zero parts".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (m, c) = two_d("concat_rows", self.shape(p))?;
            if c != d {
                return Err(OmniError::dim("concat_rows", &[rows, d], &[m, c]));
            }
            data.extend_from_slice(self.value(p).data());
            rows += m;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, d, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Mean token-level cross entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = two_d("cross_entropy", self.shape(logits))?;
        if targets.len() != m {
            return Err(OmniError::dim("cross_entropy", &[m, v], &[targets.len()]));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        let mut count = 0;
        for (row, t) in probs.chunks_mut(v).zip(targets) {
            kernels::log_softmax_in_place(row);
            if let Some(t) = *t {
                if t >= v {
                    return Err(OmniError::dim("cross_entropy target", &[v], &[t]));
                }
                loss = loss - row[t];
                count += 1;
            }
            for e in row.iter_mut() {
                *e = e.exp();
            }
        }
        if count == 0 {
            return Err(OmniError::Graph("cross entropy with no unmasked targets".into()));
        }
        let loss = loss / T::of(count as f64);
        if !loss.is_finite() {
            return Err(OmniError::Numeric("non-finite cross entropy".into()));
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Scalar node with an externally computed value and gradient `d value / d x`.
    /// Used for losses whose backward rule is evaluated alongside the forward
    /// pass (CTC).
    pub fn custom_scalar(&mut self, x: Var, value: T, grad: Vec<T>) -> Result<Var> {
        if grad.len() != self.value(x).len() {
            return Err(OmniError::dim("custom_scalar", self.shape(x), &[grad.len()]));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(value), Op::Custom { x, grad }, rg))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(OmniError::dim("weighted_sum", self.shape(v), &[]));
            }
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s)?,
            });
        }
        acc.ok_or_else(|| OmniError::Graph("weighted sum of zero terms".into()))
    }

    /// Reverse sweep from a scalar loss. A second call without [`Graph::reset`]
    /// is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(OmniError::Graph("backward called twice on the same graph".into()));
        }
        if self.value(loss).len() != 1 {
            return Err(OmniError::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            self.propagate(i, &g)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, delta: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    fn propagate(&mut self, i: usize, g: &[T]) -> Result<()> {
        let fault = if self.fault == Some(self.nodes[i].op.kind()) {
            T::of(1.5)
        } else {
            T::one()
        };
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let g: Vec<T> = g.iter().map(|&e| e * fault).collect();
        let res = self.propagate_op(&op, &g);
        self.nodes[i].op = op;
        res
    }

    fn propagate_op(&mut self, op: &Op<T>, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = two_d("matmul", self.shape(*a))?;
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_a_bt_acc(g, m, n, self.value(*b).data(), k, &mut da);
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_at_b_acc(self.value(*a).data(), m, k, g, n, &mut db);
                    self.accumulate(*b, db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); n];
                    for row in g.chunks(n) {
                        for (d, &e) in db.iter_mut().zip(row) {
                            *d = *d + e;
                        }
                    }
                    self.accumulate(*bias, db);
                }
                self.accumulate(*x, g.to_vec());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let da = g.iter().zip(self.value(*b).data()).map(|(&e, &y)| e * y).collect();
                    self.accumulate(*a, da);
                }
                if self.rg(*b) {
                    let db = g.iter().zip(self.value(*a).data()).map(|(&e, &x)| e * x).collect();
                    self.accumulate(*b, db);
                }
            }
            Op::Scale(x, c) => {
                let dx = g.iter().map(|&e| e * *c).collect();
                self.accumulate(*x, dx);
            }
            Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&e, &v)| e * kernels::silu_grad(v))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let n = self.value(*gain).len();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let nf = T::of(n as f64);
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgain = vec![T::zero(); n];
                for (r, ((xr, gr), dxr)) in xv.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)).enumerate() {
                    let inv = inv_rms[r];
                    // y = x * inv * gain; dy/dx = inv * (gain*g - x * inv^2 * <gain*g, x> / n)
                    let mut dot = T::zero();
                    for j in 0..n {
                        dgain[j] = dgain[j] + gr[j] * xr[j] * inv;
                        dot = dot + gr[j] * gv[j] * xr[j];
                    }
                    let c = inv * inv * inv * dot / nf;
                    for j in 0..n {
                        dxr[j] = gr[j] * gv[j] * inv - xr[j] * c;
                    }
                }
                let (x, gain) = (*x, *gain);
                self.accumulate(x, dx);
                self.accumulate(gain, dgain);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![T::zero(); self.value(*table).len()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (t, &e) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *t = *t + e;
                    }
                }
                self.accumulate(*table, dt);
            }
            Op::Rope { x, heads, positions } => {
                let d = self.shape(*x)[1];
                let mut dx = g.to_vec();
                kernels::rope(&mut dx, d, *heads, positions, true);
                self.accumulate(*x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                mask,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, mask, probs, g);
                self.accumulate(*q, dq);
                self.accumulate(*k, dk);
                self.accumulate(*v, dv);
            }
            Op::Softmax(x) => {
                let n = self.value(*x).cols();
                let y = self.node_value_of_softmax(*x);
                let mut dx = vec![T::zero(); g.len()];
                for ((yr, gr), dr) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::SelectRows { x, rows } => {
                let d = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (gr, &r) in g.chunks(d).zip(rows) {
                    for (t, &e) in dx[r * d..(r + 1) * d].iter_mut().zip(gr) {
                        *t = *t + e;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accumulate(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / T::of(*count as f64);
                let mut dl = vec![T::zero(); probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for j in 0..v {
                            dl[r * v + j] = probs[r * v + j] * scale;
                        }
                        dl[r * v + t] = dl[r * v + t] - scale;
                    }
                }
                self.accumulate(*logits, dl);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Custom { x, grad } => {
                let dx = grad.iter().map(|&e| e * g[0]).collect();
                self.accumulate(*x, dx);
            }
        }
        Ok(())
    }

    // The softmax output is the value of the node currently being propagated; it
    // is recomputed from the input to keep the op payload small.
    fn node_value_of_softmax(&self, x: Var) -> Vec<T> {
        self.value(x).softmax().map(Tensor::into_data).unwrap_or_default()
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &Mask,
        probs: &[T],
        g: &[T],
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let d = self.shape(q)[1];
        let (lq, lk) = (mask.queries, mask.keys);
        let hd = d / heads;
        let scale = T::one() / T::of(hd as f64).sqrt();
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = vec![T::zero(); lq * d];
        let mut dk = vec![T::zero(); lk * d];
        let mut dv = vec![T::zero(); lk * d];
        let mut dp = vec![T::zero(); lk];
        for h in 0..heads {
            let off = h * hd;
            for i in 0..lq {
                let prow = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let gi = &g[i * d + off..i * d + off + hd];
                let mut dot = T::zero();
                for j in 0..lk {
                    if prow[j] == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let vj = &vv[j * d + off..j * d + off + hd];
                    dp[j] = gi.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot = dot + dp[j] * prow[j];
                    for (t, &e) in dv[j * d + off..j * d + off + hd].iter_mut().zip(gi) {
                        *t = *t + prow[j] * e;
                    }
                }
                let qi = &qv[i * d + off..i * d + off + hd];
                for j in 0..lk {
                    if prow[j] == T::zero() {
                        continue;
                    }
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let kj = &kv[j * d + off..j * d + off + hd];
                    for (t, &e) in dq[i * d + off..i * d + off + hd].iter_mut().zip(kj) {
                        *t = *t + ds * e;
                    }
                    for (t, &e) in dk[j * d + off..j * d + off + hd].iter_mut().zip(qi) {
                        *t = *t + ds * e;
                    }
                }
            }
        }
        (dq, dk, dv)
    }
}
