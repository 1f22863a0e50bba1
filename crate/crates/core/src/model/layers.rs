//! Transformer layer in two forms: recorded on an autodiff graph for training,
//! and incremental over a key/value cache for inference. Both share the slice
//! kernels, and tests hold them equal.

use std::sync::Arc;

use crate::error::Result;
use crate::model::params::LayerParams;
use crate::numerics::kernels::{self, Mask};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct LayerVars {
    attn_norm: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    cross: Option<[Var; 5]>,
    ffn_norm: Var,
    w1: Var,
    w2: Var,
}

#[derive(Clone, Debug)]
pub struct StackVars {
    pub layers: Vec<LayerVars>,
    pub norm: Var,
}

pub fn bind<T: Scalar>(g: &mut Graph<T>, t: &Tensor<T>, trainable: bool) -> Var {
    g.leaf(t.clone(), trainable)
}

pub fn bind_stack<T: Scalar>(
    g: &mut Graph<T>,
    layers: &[LayerParams<T>],
    norm: &Tensor<T>,
    trainable: bool,
) -> StackVars {
    bind_stack_with("", layers, norm, &mut |_, t| bind(g, t, trainable))
}

/// Binds a stack through `f(name, tensor)`, naming tensors `{prefix}.{i}.*`
/// and `{prefix}.norm` in canonical order.
pub fn bind_stack_with<T: Scalar>(
    prefix: &str,
    layers: &[LayerParams<T>],
    norm: &Tensor<T>,
    f: &mut dyn FnMut(String, &Tensor<T>) -> Var,
) -> StackVars {
    let layers = layers
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let mut b = |s: &str, t: &Tensor<T>| f(format!("{prefix}.{i}.{s}"), t);
            LayerVars {
                attn_norm: b("attn_norm", &l.attn_norm),
                wq: b("wq", &l.wq),
                wk: b("wk", &l.wk),
                wv: b("wv", &l.wv),
                wo: b("wo", &l.wo),
                cross: l.cross.as_ref().map(|c| {
                    [
                        b("cross_norm", &c.norm),
                        b("cross_wq", &c.wq),
                        b("cross_wk", &c.wk),
                        b("cross_wv", &c.wv),
                        b("cross_wo", &c.wo),
                    ]
                }),
                ffn_norm: b("ffn_norm", &l.ffn_norm),
                w1: b("w1", &l.w1),
                w2: b("w2", &l.w2),
            }
        })
        .collect();
    StackVars {
        layers,
        norm: f(format!("{prefix}.norm"), norm),
    }
}

/// Text conditioning for the top stack on the graph.
pub enum GraphFusion {
    None,
    /// Cross-attention from every position to its masked window of `text` rows.
    /// Queries are rotated by their window end (0-based), keys by their row, so
    /// scores see the offset of each text row from the token being spoken.
    Attention { text: Var, mask: Arc<Mask>, ends: Vec<usize> },
    /// Rows added before every layer's FFN (one per position).
    AddPerLayer { rows: Var },
}

fn layer_graph<T: Scalar>(
    g: &mut Graph<T>,
    lv: &LayerVars,
    x: Var,
    heads: usize,
    positions: &[usize],
    causal: &Arc<Mask>,
    fusion: &GraphFusion,
) -> Result<Var> {
    let h = g.rms_norm(x, lv.attn_norm)?;
    let q = g.matmul(h, lv.wq)?;
    let k = g.matmul(h, lv.wk)?;
    let v = g.matmul(h, lv.wv)?;
    let q = g.rope(q, heads, positions)?;
    let k = g.rope(k, heads, positions)?;
    let a = g.attention(q, k, v, heads, causal.clone())?;
    let a = g.matmul(a, lv.wo)?;
    let mut x = g.add(x, a)?;
    match fusion {
        GraphFusion::None => {}
        GraphFusion::Attention { text, mask, ends } => {
            if let Some([norm, wq, wk, wv, wo]) = lv.cross {
                let h = g.rms_norm(x, norm)?;
                let q = g.matmul(h, wq)?;
                let q = g.rope(q, heads, ends)?;
                let k = g.matmul(*text, wk)?;
                let rows: Vec<usize> = (0..g.shape(*text)[0]).collect();
                let k = g.rope(k, heads, &rows)?;
                let v = g.matmul(*text, wv)?;
                let a = g.attention(q, k, v, heads, mask.clone())?;
                let a = g.matmul(a, wo)?;
                x = g.add(x, a)?;
            }
        }
        GraphFusion::AddPerLayer { rows } => {
            x = g.add(x, *rows)?;
        }
    }
    let h = g.rms_norm(x, lv.ffn_norm)?;
    let f = g.matmul(h, lv.w1)?;
    let f = g.silu(f);
    let f = g.matmul(f, lv.w2)?;
    g.add(x, f)
}

/// Causal stack over `x: [L, d]` at positions `0..L`; returns the normed output.
pub fn stack_graph<T: Scalar>(
    g: &mut Graph<T>,
    sv: &StackVars,
    x: Var,
    heads: usize,
    fusion: &GraphFusion,
) -> Result<Var> {
    let len = g.shape(x)[0];
    let positions: Vec<usize> = (0..len).collect();
    let causal = Arc::new(Mask::causal(len));
    let mut x = x;
    for lv in &sv.layers {
        x = layer_graph(g, lv, x, heads, &positions, &causal, fusion)?;
    }
    g.rms_norm(x, sv.norm)
}

/// `x: [rows, w.rows]` times `w`.
pub fn linear<T: Scalar>(x: &[T], rows: usize, w: &Tensor<T>) -> Vec<T> {
    kernels::matmul(x, rows, w.rows(), w.data(), w.cols())
}

pub fn rms_rows<T: Scalar>(x: &[T], d: usize, gain: &Tensor<T>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    kernels::rms_norm(x, d, gain.data(), &mut out);
    out
}

fn add_in_place<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a = *a + b;
    }
}

#[derive(Clone, Debug, Default)]
pub struct LayerCache<T> {
    k: Vec<T>,
    v: Vec<T>,
}

/// Key/value cache of one layer stack; `len` positions processed so far.
#[derive(Clone, Debug)]
pub struct StackCache<T> {
    layers: Vec<LayerCache<T>>,
    len: usize,
}

impl<T: Scalar> StackCache<T> {
    pub fn new(layers: usize) -> Self {
        StackCache {
            layers: vec![LayerCache { k: Vec::new(), v: Vec::new() }; layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Rows stored per layer; equals `len` whenever the cache is consistent.
    pub fn layer_rows(&self, d: usize) -> Vec<usize> {
        self.layers.iter().map(|l| l.k.len() / d.max(1)).collect()
    }
}

/// Cross-attention keys and values of the text representations, per top layer.
#[derive(Clone, Debug, Default)]
pub struct TextKv<T> {
    pub k: Vec<T>,
    pub v: Vec<T>,
}

/// Text conditioning for one incremental top-stack call.
pub enum StepFusion<'a, T> {
    None,
    /// Per-layer projected text memory and one inclusive 0-based range per new row.
    Attention { text_kv: &'a [TextKv<T>], ranges: &'a [(usize, usize)] },
    /// One row per new position, added before every FFN.
    AddPerLayer { rows: &'a [T] },
}

/// Runs `x: [n, d]` (the next `n` positions) through the stack, extending the
/// cache. Returns the normed output rows.
pub fn stack_step<T: Scalar>(
    layers: &[LayerParams<T>],
    norm: &Tensor<T>,
    cache: &mut StackCache<T>,
    mut x: Vec<T>,
    d: usize,
    heads: usize,
    fusion: &StepFusion<'_, T>,
) -> Result<Vec<T>> {
    let n = x.len() / d;
    let past = cache.len;
    let positions: Vec<usize> = (past..past + n).collect();
    let causal = Mask::causal_offset(n, past);
    for (li, (lp, lc)) in layers.iter().zip(cache.layers.iter_mut()).enumerate() {
        let h = rms_rows(&x, d, &lp.attn_norm);
        let mut q = linear(&h, n, &lp.wq);
        let mut k = linear(&h, n, &lp.wk);
        let v = linear(&h, n, &lp.wv);
        kernels::rope(&mut q, d, heads, &positions, false);
        kernels::rope(&mut k, d, heads, &positions, false);
        lc.k.extend_from_slice(&k);
        lc.v.extend_from_slice(&v);
        let (a, _) = kernels::attention(&q, &lc.k, &lc.v, d, heads, &causal);
        add_in_place(&mut x, &linear(&a, n, &lp.wo));
        match fusion {
            StepFusion::None => {}
            StepFusion::Attention { text_kv, ranges } => {
                if let Some(c) = &lp.cross {
                    let mem = &text_kv[li];
                    let keys = mem.k.len() / d;
                    for &(s, e) in ranges.iter() {
                        if e >= keys || s > e {
                            return Err(crate::error::OmniError::Scheduling(format!(
                                "fusion range {s}..={e} outside {keys} text rows"
                            )));
                        }
                    }
                    let mask = Mask::windows(ranges, keys);
                    let h = rms_rows(&x, d, &c.norm);
                    let mut q = linear(&h, n, &c.wq);
                    let ends: Vec<usize> = ranges.iter().map(|&(_, e)| e).collect();
                    kernels::rope(&mut q, d, heads, &ends, false);
                    let (a, _) = kernels::attention(&q, &mem.k, &mem.v, d, heads, &mask);
                    add_in_place(&mut x, &linear(&a, n, &c.wo));
                }
            }
            StepFusion::AddPerLayer { rows } => add_in_place(&mut x, rows),
        }
        let h = rms_rows(&x, d, &lp.ffn_norm);
        let mut f = linear(&h, n, &lp.w1);
        for e in f.iter_mut() {
            *e = kernels::silu(*e);
        }
        add_in_place(&mut x, &linear(&f, n, &lp.w2));
    }
    cache.len += n;
    Ok(rms_rows(&x, d, norm))
}
