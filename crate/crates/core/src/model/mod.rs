//! Decoder-only stack: bottom speech layers with a CTC head, the core language
//! model, top speech layers with alignment-based fusion, and a vision projection.

mod config;
pub mod layers;
mod params;

use std::sync::Arc;

pub use config::{fusion_window, FusionType, FusionWindow, ModelConfig, TopInput};
pub use layers::{StackCache, StackVars, TextKv};
pub use params::{group_of, CrossAttnParams, LayerParams, ModelParams, ParamGroup, VisionParams};

use crate::ctc::CtcAlignment;
use crate::error::{OmniError, Result};
use crate::numerics::kernels::{self, Mask};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::vocab::{MultimodalVocab, TokenId, TokenKind};
use layers::{bind, bind_stack_with, linear, stack_graph, stack_step, GraphFusion, StepFusion};

#[derive(Clone, Debug)]
pub struct OmniModel<T> {
    config: ModelConfig,
    vocab: MultimodalVocab,
    pub params: ModelParams<T>,
}

/// Text representations `H^T` seen by the top stack, with their per-layer
/// cross-attention projections.
#[derive(Clone, Debug)]
pub struct TextMemory<T> {
    rows: Vec<T>,
    d: usize,
    kv: Vec<TextKv<T>>,
}

impl<T: Scalar> TextMemory<T> {
    pub fn len(&self) -> usize {
        self.rows.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// 0-based row.
    pub fn row(&self, i: usize) -> &[T] {
        &self.rows[i * self.d..(i + 1) * self.d]
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::matrix(self.len(), self.d, self.rows.clone()).expect("consistent rows")
    }
}

/// Per-session key/value caches for every stack.
#[derive(Clone, Debug)]
pub struct SessionCache<T> {
    /// Bottom stack over the user's input units.
    pub bottom_input: StackCache<T>,
    /// Bottom stack over the generated units.
    pub bottom_generated: StackCache<T>,
    pub core: StackCache<T>,
    pub top: StackCache<T>,
    pub text: TextMemory<T>,
}

/// Hidden states of newly fed core positions and the text logits at the last one.
#[derive(Clone, Debug)]
pub struct CoreStep<T> {
    pub hidden: Tensor<T>,
    pub logits: Vec<T>,
}

/// Graph handles of the bottom stack and CTC head.
pub struct BottomVars {
    pub embed: Var,
    pub stack: StackVars,
    pub ctc_head: Var,
}

pub struct CoreVars {
    pub embed: Var,
    pub stack: StackVars,
    pub text_head: Var,
}

pub struct TopVars {
    pub start: Var,
    pub stack: StackVars,
    pub unit_head: Var,
}

pub struct VisionVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl<T: Scalar> OmniModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let expected = ModelParams::<T>::init(&config, 0)?;
        let want = expected.named();
        let have = params.named();
        if want.len() != have.len() {
            return Err(OmniError::Config(format!(
                "parameter set has {} tensors, config expects {}",
                have.len(),
                want.len()
            )));
        }
        for ((wn, wt), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || wt.shape() != ht.shape() {
                return Err(OmniError::Config(format!(
                    "parameter {hn:?} {:?} does not match config ({wn:?} {:?})",
                    ht.shape(),
                    wt.shape()
                )));
            }
        }
        Ok(OmniModel { config, vocab, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocab(&self) -> &MultimodalVocab {
        &self.vocab
    }

    fn d(&self) -> usize {
        self.config.d_model
    }

    /// Row index into the speech embedding table for a unit or blank id.
    fn speech_row(&self, id: TokenId) -> Result<usize> {
        match self.vocab.classify(id)? {
            TokenKind::Unit | TokenKind::Blank => Ok((id - self.vocab.text_size()) as usize),
            TokenKind::Text => Err(OmniError::TokenKind {
                id,
                expected: "speech unit",
                found: TokenKind::Text.name(),
            }),
        }
    }

    fn unit_rows(&self, units: &[TokenId]) -> Result<Vec<usize>> {
        units
            .iter()
            .map(|&u| {
                self.vocab.expect(u, TokenKind::Unit)?;
                self.speech_row(u)
            })
            .collect()
    }

    fn text_rows(&self, ids: &[TokenId]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&t| {
                self.vocab.expect(t, TokenKind::Text)?;
                Ok(t as usize)
            })
            .collect()
    }

    /// Embedding rows of any ids in `V^omni`.
    pub fn embed(&self, ids: &[TokenId]) -> Result<Tensor<T>> {
        let d = self.d();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            match self.vocab.classify(id)? {
                TokenKind::Text => data.extend_from_slice(self.params.embed_text.row(id as usize)),
                _ => data.extend_from_slice(self.params.embed_speech.row(self.speech_row(id)?)),
            }
        }
        Tensor::matrix(ids.len(), d, data)
    }

    pub fn new_cache(&self) -> SessionCache<T> {
        let c = &self.config;
        SessionCache {
            bottom_input: StackCache::new(c.n_bottom_layers),
            bottom_generated: StackCache::new(c.n_bottom_layers),
            core: StackCache::new(c.n_core_layers),
            top: StackCache::new(c.n_top_layers),
            text: self.new_text_memory(),
        }
    }

    pub fn new_text_memory(&self) -> TextMemory<T> {
        TextMemory {
            rows: Vec::new(),
            d: self.d(),
            kv: vec![TextKv::default(); self.config.n_top_layers],
        }
    }

    /// Appends `H^T` rows to the text memory, projecting them for cross-attention.
    pub fn push_text(&self, mem: &mut TextMemory<T>, rows: &Tensor<T>) -> Result<()> {
        let d = self.d();
        if rows.is_empty() {
            return Ok(());
        }
        if rows.cols() != d {
            return Err(OmniError::dim("push_text", rows.shape(), &[rows.rows(), d]));
        }
        let n = rows.rows();
        let past = mem.rows.len() / d;
        let positions: Vec<usize> = (past..past + n).collect();
        mem.rows.extend_from_slice(rows.data());
        for (kv, lp) in mem.kv.iter_mut().zip(&self.params.top) {
            if let Some(c) = &lp.cross {
                let mut k = linear(rows.data(), n, &c.wk);
                kernels::rope(&mut k, d, self.config.n_heads, &positions, false);
                kv.k.extend(k);
                kv.v.extend(linear(rows.data(), n, &c.wv));
            }
        }
        Ok(())
    }

    /// Bottom speech layers over the next units of a stream: `H^U` rows `[n, d]`.
    pub fn bottom_forward(&self, units: &[TokenId], cache: &mut StackCache<T>) -> Result<Tensor<T>> {
        let d = self.d();
        let rows = self.unit_rows(units)?;
        if rows.is_empty() {
            return Ok(Tensor::zeros(&[0, d]));
        }
        let mut x = Vec::with_capacity(rows.len() * d);
        for r in &rows {
            x.extend_from_slice(self.params.embed_speech.row(*r));
        }
        let out = stack_step(
            &self.params.bottom,
            &self.params.bottom_norm,
            cache,
            x,
            d,
            self.config.n_heads,
            &StepFusion::None,
        )?;
        Tensor::matrix(rows.len(), d, out)
    }

    /// CTC distribution logits `D^U`, `[n, |V^omni|]`.
    pub fn ctc_logits(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let n = h.shape().first().copied().unwrap_or(0);
        if h.cols() != self.d() {
            return Err(OmniError::dim("ctc_logits", h.shape(), &[n, self.d()]));
        }
        Tensor::matrix(n, self.vocab.total() as usize, linear(h.data(), n, &self.params.ctc_head))
    }

    /// Two-layer projection of vision features into model width.
    pub fn vision_encode(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        let c = &self.config;
        if features.shape() != [c.vision_tokens_per_image, c.vision_feature_dim] {
            return Err(OmniError::dim(
                "vision_encode",
                features.shape(),
                &[c.vision_tokens_per_image, c.vision_feature_dim],
            ));
        }
        let n = c.vision_tokens_per_image;
        let v = &self.params.vision;
        let mut h = linear(features.data(), n, &v.w1);
        for row in h.chunks_mut(self.d()) {
            for (e, &b) in row.iter_mut().zip(v.b1.data()) {
                *e = kernels::silu(*e + b);
            }
        }
        let mut o = linear(&h, n, &v.w2);
        for row in o.chunks_mut(self.d()) {
            for (e, &b) in row.iter_mut().zip(v.b2.data()) {
                *e = *e + b;
            }
        }
        Tensor::matrix(n, self.d(), o)
    }

    /// Feeds the next context rows (vision, speech or text embeddings) through
    /// the core. Returns their hidden states `H^T` and the text logits at the
    /// last position.
    pub fn core_forward(&self, rows: &Tensor<T>, cache: &mut StackCache<T>) -> Result<CoreStep<T>> {
        let d = self.d();
        if rows.is_empty() {
            return Err(OmniError::Config("core_forward needs a non-empty context".into()));
        }
        if rows.cols() != d {
            return Err(OmniError::dim("core_forward", rows.shape(), &[rows.rows(), d]));
        }
        let n = rows.rows();
        let hidden = stack_step(
            &self.params.core,
            &self.params.core_norm,
            cache,
            rows.data().to_vec(),
            d,
            self.config.n_heads,
            &StepFusion::None,
        )?;
        let logits = self.text_logits(&hidden[(n - 1) * d..]);
        Ok(CoreStep {
            hidden: Tensor::matrix(n, d, hidden)?,
            logits,
        })
    }

    pub fn text_logits(&self, hidden_row: &[T]) -> Vec<T> {
        linear(hidden_row, 1, &self.params.text_head)
    }

    /// Input row of the top stack for a generated unit: its bottom encoding or
    /// its embedding, per configuration.
    pub fn top_input_row(&self, unit: TokenId, bottom_row: &[T]) -> Result<Vec<T>> {
        match self.config.top_input {
            TopInput::BottomStack => Ok(bottom_row.to_vec()),
            TopInput::Embedding => Ok(self.params.embed_speech.row(self.speech_row(unit)?).to_vec()),
        }
    }

    pub fn top_start_row(&self) -> &[T] {
        self.params.top_start.data()
    }

    /// Top speech layers over the next positions with explicit 1-based
    /// inclusive text windows (one per row). Returns unit-head logits at the
    /// last position (`unit_size + 1` wide, the last entry is unit-eos).
    pub fn top_forward_windows(
        &self,
        rows: &Tensor<T>,
        text: &TextMemory<T>,
        windows: &[(usize, usize)],
        cache: &mut StackCache<T>,
    ) -> Result<Vec<T>> {
        let d = self.d();
        let n = rows.rows();
        if rows.is_empty() || rows.cols() != d || windows.len() != n {
            return Err(OmniError::dim("top_forward", rows.shape(), &[windows.len(), d]));
        }
        for &(s, e) in windows {
            if s == 0 || s > e || e > text.len() {
                return Err(OmniError::Scheduling(format!(
                    "fusion window [{s}, {e}] references text beyond the {} generated positions",
                    text.len()
                )));
            }
        }
        let mut x = rows.data().to_vec();
        let aligned: Vec<T> = windows.iter().flat_map(|&(_, e)| text.row(e - 1).to_vec()).collect();
        let ranges: Vec<(usize, usize)> = windows.iter().map(|&(s, e)| (s - 1, e - 1)).collect();
        let fusion = match self.config.fusion_type {
            FusionType::Attention => StepFusion::Attention {
                text_kv: &text.kv,
                ranges: &ranges,
            },
            FusionType::AddInput => {
                for (a, &b) in x.iter_mut().zip(&aligned) {
                    *a = *a + b;
                }
                StepFusion::None
            }
            FusionType::AddPerLayer => StepFusion::AddPerLayer { rows: &aligned },
        };
        let out = stack_step(
            &self.params.top,
            &self.params.top_norm,
            cache,
            x,
            d,
            self.config.n_heads,
            &fusion,
        )?;
        Ok(linear(&out[(n - 1) * d..], 1, &self.params.unit_head))
    }

    /// Top speech layers with windows derived from the alignment over generated
    /// units: the row at top position `p` uses `N_p` (count over units `1..=p`).
    pub fn top_forward(
        &self,
        rows: &Tensor<T>,
        text: &TextMemory<T>,
        align: &CtcAlignment,
        cache: &mut StackCache<T>,
    ) -> Result<Vec<T>> {
        let past = cache.len();
        let n = rows.rows();
        let mut windows = Vec::with_capacity(n);
        for p in past..past + n {
            if p > align.len() {
                return Err(OmniError::Scheduling(format!(
                    "top position {p} has no alignment ({} frames)",
                    align.len()
                )));
            }
            windows.push(fusion_window(align.count_at(p), self.config.fusion_window, text.len())?);
        }
        self.top_forward_windows(rows, text, &windows, cache)
    }

    pub fn bind_bottom(&self, g: &mut Graph<T>, trainable: bool) -> BottomVars {
        self.bind_bottom_with(&mut |_, t| bind(g, t, trainable))
    }

    pub fn bind_core(&self, g: &mut Graph<T>, trainable: bool) -> CoreVars {
        self.bind_core_with(&mut |_, t| bind(g, t, trainable))
    }

    pub fn bind_top(&self, g: &mut Graph<T>, trainable: bool) -> TopVars {
        self.bind_top_with(&mut |_, t| bind(g, t, trainable))
    }

    pub fn bind_vision(&self, g: &mut Graph<T>, trainable: bool) -> VisionVars {
        self.bind_vision_with(&mut |_, t| bind(g, t, trainable))
    }

    /// The `*_with` binders hand every tensor to `f` with its canonical name.
    pub fn bind_bottom_with(&self, f: &mut dyn FnMut(String, &Tensor<T>) -> Var) -> BottomVars {
        let p = &self.params;
        BottomVars {
            embed: f("embed.speech".into(), &p.embed_speech),
            stack: bind_stack_with("bottom", &p.bottom, &p.bottom_norm, f),
            ctc_head: f("ctc_head".into(), &p.ctc_head),
        }
    }

    pub fn bind_core_with(&self, f: &mut dyn FnMut(String, &Tensor<T>) -> Var) -> CoreVars {
        let p = &self.params;
        CoreVars {
            embed: f("embed.text".into(), &p.embed_text),
            stack: bind_stack_with("core", &p.core, &p.core_norm, f),
            text_head: f("text_head".into(), &p.text_head),
        }
    }

    pub fn bind_top_with(&self, f: &mut dyn FnMut(String, &Tensor<T>) -> Var) -> TopVars {
        let p = &self.params;
        TopVars {
            start: f("top.start".into(), &p.top_start),
            stack: bind_stack_with("top", &p.top, &p.top_norm, f),
            unit_head: f("unit_head".into(), &p.unit_head),
        }
    }

    pub fn bind_vision_with(&self, f: &mut dyn FnMut(String, &Tensor<T>) -> Var) -> VisionVars {
        let v = &self.params.vision;
        VisionVars {
            w1: f("vision.w1".into(), &v.w1),
            b1: f("vision.b1".into(), &v.b1),
            w2: f("vision.w2".into(), &v.w2),
            b2: f("vision.b2".into(), &v.b2),
        }
    }

    /// Bottom stack over a whole unit sequence on the graph: `H^U`.
    pub fn graph_bottom(&self, g: &mut Graph<T>, bv: &BottomVars, units: &[TokenId]) -> Result<Var> {
        let rows = self.unit_rows(units)?;
        if rows.is_empty() {
            return Err(OmniError::Config("graph_bottom needs at least one unit".into()));
        }
        let x = g.embedding(bv.embed, &rows)?;
        stack_graph(g, &bv.stack, x, self.config.n_heads, &GraphFusion::None)
    }

    pub fn graph_ctc_logits(&self, g: &mut Graph<T>, bv: &BottomVars, h: Var) -> Result<Var> {
        g.matmul(h, bv.ctc_head)
    }

    pub fn graph_text_embed(&self, g: &mut Graph<T>, cv: &CoreVars, ids: &[TokenId]) -> Result<Var> {
        let rows = self.text_rows(ids)?;
        g.embedding(cv.embed, &rows)
    }

    /// Core stack over a full context `[L, d]`; returns the normed hidden states.
    pub fn graph_core(&self, g: &mut Graph<T>, cv: &CoreVars, context: Var) -> Result<Var> {
        stack_graph(g, &cv.stack, context, self.config.n_heads, &GraphFusion::None)
    }

    pub fn graph_text_logits(&self, g: &mut Graph<T>, cv: &CoreVars, hidden: Var) -> Result<Var> {
        g.matmul(hidden, cv.text_head)
    }

    pub fn graph_vision(&self, g: &mut Graph<T>, vv: &VisionVars, features: &Tensor<T>) -> Result<Var> {
        let c = &self.config;
        if features.shape() != [c.vision_tokens_per_image, c.vision_feature_dim] {
            return Err(OmniError::dim(
                "vision_encode",
                features.shape(),
                &[c.vision_tokens_per_image, c.vision_feature_dim],
            ));
        }
        let x = g.constant(features.clone());
        let h = g.matmul(x, vv.w1)?;
        let h = g.add_bias(h, vv.b1)?;
        let h = g.silu(h);
        let o = g.matmul(h, vv.w2)?;
        g.add_bias(o, vv.b2)
    }

    /// Top stack on the graph. `inputs` are the per-position rows after the
    /// start vector (one per teacher-forced unit); `text` is `H^T`;
    /// `windows` are 1-based inclusive per position (start position included).
    /// Returns unit logits `[inputs + 1, unit_size + 1]`.
    pub fn graph_top(
        &self,
        g: &mut Graph<T>,
        tv: &TopVars,
        inputs: Option<Var>,
        text: Var,
        windows: &[(usize, usize)],
    ) -> Result<Var> {
        let x = match inputs {
            Some(rows) => g.concat_rows(&[tv.start, rows])?,
            None => tv.start,
        };
        let positions = g.shape(x)[0];
        let text_len = g.shape(text)[0];
        if windows.len() != positions {
            return Err(OmniError::dim("graph_top windows", &[positions], &[windows.len()]));
        }
        for &(s, e) in windows {
            if s == 0 || s > e || e > text_len {
                return Err(OmniError::Scheduling(format!(
                    "fusion window [{s}, {e}] outside {text_len} text positions"
                )));
            }
        }
        let upper: Vec<usize> = windows.iter().map(|&(_, e)| e - 1).collect();
        let (x, fusion) = match self.config.fusion_type {
            FusionType::Attention => {
                let ranges: Vec<(usize, usize)> = windows.iter().map(|&(s, e)| (s - 1, e - 1)).collect();
                let mask = Arc::new(Mask::windows(&ranges, text_len));
                (x, GraphFusion::Attention { text, mask, ends: upper.clone() })
            }
            FusionType::AddInput => {
                let rows = g.select_rows(text, &upper)?;
                (g.add(x, rows)?, GraphFusion::None)
            }
            FusionType::AddPerLayer => {
                let rows = g.select_rows(text, &upper)?;
                (x, GraphFusion::AddPerLayer { rows })
            }
        };
        let h = stack_graph(g, &tv.stack, x, self.config.n_heads, &fusion)?;
        g.matmul(h, tv.unit_head)
    }

    /// Embedding rows of units on the graph, for `TopInput::Embedding`.
    pub fn graph_unit_embed(&self, g: &mut Graph<T>, bv: &BottomVars, units: &[TokenId]) -> Result<Var> {
        let rows = self.unit_rows(units)?;
        g.embedding(bv.embed, &rows)
    }
}
