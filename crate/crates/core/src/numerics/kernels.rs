//! Slice-level kernels shared by the autodiff graph and the cached inference path.
//! All matrices are row-major.

use crate::scalar::Scalar;

/// `[m,k] x [k,n]`.
pub fn matmul<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, m, k, b, n, &mut out);
    out
}

/// `out += a x b`.
pub fn matmul_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out += aᵀ x b` with `a: [m,k]`, `b: [m,n]`, `out: [k,n]`.
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out += a x bᵀ` with `a: [m,k]`, `b: [n,k]`.
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], m: usize, k: usize, b: &[T], n: usize, out: &mut [T]) {
    let bt = transpose(b, n, k);
    matmul_acc(a, m, k, &bt, n, out);
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

pub fn log_sum_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Index of the largest element; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise `x / rms(x) * gain`; returns the per-row inverse rms.
pub fn rms_norm<T: Scalar>(x: &[T], cols: usize, gain: &[T], out: &mut [T]) -> Vec<T> {
    let eps = T::of(RMS_EPS);
    let n = T::of(cols as f64);
    let mut inv = Vec::with_capacity(x.len() / cols.max(1));
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / n;
        let r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    inv
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub fn silu<T: Scalar>(v: T) -> T {
    v * sigmoid(v)
}

pub fn silu_grad<T: Scalar>(v: T) -> T {
    let s = sigmoid(v);
    s * (T::one() + v * (T::one() - s))
}

/// Boolean attention mask `[queries, keys]`; `true` means the key is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub queries: usize,
    pub keys: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn from_fn(queries: usize, keys: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(queries * keys);
        for q in 0..queries {
            for k in 0..keys {
                allowed.push(f(q, k));
            }
        }
        Mask {
            queries,
            keys,
            allowed,
        }
    }

    /// Square causal mask.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k <= q)
    }

    /// Causal mask for `queries` new rows appended after `past` cached keys.
    pub fn causal_offset(queries: usize, past: usize) -> Self {
        Self::from_fn(queries, past + queries, |q, k| k <= past + q)
    }

    /// Each query sees the inclusive 0-based key range given for it.
    pub fn windows(ranges: &[(usize, usize)], keys: usize) -> Self {
        Self::from_fn(ranges.len(), keys, |q, k| k >= ranges[q].0 && k <= ranges[q].1)
    }

    pub fn allows(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }

    /// First query row with no visible key, if any.
    pub fn first_empty_row(&self) -> Option<usize> {
        (0..self.queries).find(|&q| !self.allowed[q * self.keys..(q + 1) * self.keys].contains(&true))
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q: [lq, d]`, `k, v: [lk, d]`, heads split the model width evenly. Returns the
/// output `[lq, d]` and the attention weights `[heads, lq, lk]`; masked weights are
/// exactly zero.
pub fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    d: usize,
    heads: usize,
    mask: &Mask,
) -> (Vec<T>, Vec<T>) {
    let (lq, lk) = (mask.queries, mask.keys);
    let hd = d / heads;
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut out = vec![T::zero(); lq * d];
    let mut probs = vec![T::zero(); heads * lq * lk];
    for h in 0..heads {
        let off = h * hd;
        for i in 0..lq {
            let qi = &q[i * d + off..i * d + off + hd];
            let prow = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
            let mut max = T::neg_infinity();
            for j in 0..lk {
                if mask.allows(i, j) {
                    let kj = &k[j * d + off..j * d + off + hd];
                    let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    prow[j] = s;
                    max = max.max(s);
                }
            }
            let mut sum = T::zero();
            for j in 0..lk {
                if mask.allows(i, j) {
                    let e = (prow[j] - max).exp();
                    prow[j] = e;
                    sum = sum + e;
                } else {
                    prow[j] = T::zero();
                }
            }
            let orow = &mut out[i * d + off..i * d + off + hd];
            for j in 0..lk {
                if prow[j] == T::zero() {
                    continue;
                }
                prow[j] = prow[j] / sum;
                let p = prow[j];
                let vj = &v[j * d + off..j * d + off + hd];
                for (o, &vv) in orow.iter_mut().zip(vj) {
                    *o = *o + p * vv;
                }
            }
        }
    }
    (out, probs)
}

/// Rotary position embedding applied in place to each head of every row.
/// `inverse` rotates by the negated angle (used for the backward pass).
pub fn rope<T: Scalar>(x: &mut [T], d: usize, heads: usize, positions: &[usize], inverse: bool) {
    let hd = d / heads;
    let half = hd / 2;
    for (row, &pos) in x.chunks_mut(d).zip(positions) {
        for h in 0..heads {
            let base = h * hd;
            for i in 0..half {
                let freq = 10000f64.powf(-2.0 * i as f64 / hd as f64);
                let ang = pos as f64 * freq;
                let (s, c) = if inverse { (-ang.sin(), ang.cos()) } else { (ang.sin(), ang.cos()) };
                let (s, c) = (T::of(s), T::of(c));
                let a = row[base + 2 * i];
                let b = row[base + 2 * i + 1];
                row[base + 2 * i] = a * c - b * s;
                row[base + 2 * i + 1] = a * s + b * c;
            }
        }
    }
}
