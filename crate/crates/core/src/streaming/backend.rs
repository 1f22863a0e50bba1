//! What a streaming session needs from a model. The real implementation wraps
//! [`OmniModel`]; [`MockBackend`] is a scripted stand-in for scheduler tests.

use std::sync::Arc;

use crate::ctc::frame_argmax;
use crate::error::{OmniError, Result};
use crate::model::{OmniModel, SessionCache};
use crate::numerics::Tensor;
use crate::scalar::Scalar;
use crate::vocab::{MultimodalVocab, TokenId, TokenKind};

pub trait StreamBackend {
    fn vocab(&self) -> &MultimodalVocab;

    /// Projects vision features and appends them to the core context.
    fn feed_vision(&mut self, features: &Tensor<f32>) -> Result<()>;

    /// Encodes one input unit with the bottom stack, appends it to the core
    /// context (unless it is dropped as blank) and returns its CTC argmax.
    fn feed_input_unit(&mut self, unit: TokenId) -> Result<TokenId>;

    /// Appends prompt text (including the final bos) to the core context.
    fn feed_context_text(&mut self, ids: &[TokenId]) -> Result<()>;

    /// Appends a generated token (or eos) to the core context and records its
    /// hidden state as a text representation for the top stack.
    fn feed_generated_text(&mut self, id: TokenId) -> Result<()>;

    /// Text-head logits at the latest core position (`text_size` wide).
    fn text_logits(&self) -> Result<Vec<f64>>;

    /// Number of text representations available to the top stack.
    fn text_len(&self) -> usize;

    /// Unit-head logits for the next unit with the given 1-based inclusive
    /// fusion window (`unit_size + 1` wide; the last entry ends speech).
    fn unit_logits(&mut self, window: (usize, usize)) -> Result<Vec<f64>>;

    /// Encodes a generated unit with the bottom stack and returns its CTC argmax.
    fn feed_generated_unit(&mut self, unit: TokenId) -> Result<TokenId>;
}

pub struct ModelBackend<T> {
    model: Arc<OmniModel<T>>,
    cache: SessionCache<T>,
    logits: Option<Vec<T>>,
    /// Top-stack input row waiting for the window of the unit it predicts.
    pending_top: Option<Vec<T>>,
}

impl<T: Scalar> ModelBackend<T> {
    pub fn new(model: Arc<OmniModel<T>>) -> Self {
        let cache = model.new_cache();
        let start = model.top_start_row().to_vec();
        ModelBackend {
            model,
            cache,
            logits: None,
            pending_top: Some(start),
        }
    }

    pub fn cache(&self) -> &SessionCache<T> {
        &self.cache
    }

    fn feed_core(&mut self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let step = self.model.core_forward(rows, &mut self.cache.core)?;
        self.logits = Some(step.logits);
        Ok(step.hidden)
    }

    fn ctc_argmax(&self, h: &Tensor<T>) -> Result<TokenId> {
        let d = self.model.ctc_logits(h)?;
        Ok(frame_argmax(d.row(0), self.model.vocab()))
    }
}

impl<T: Scalar> StreamBackend for ModelBackend<T> {
    fn vocab(&self) -> &MultimodalVocab {
        self.model.vocab()
    }

    fn feed_vision(&mut self, features: &Tensor<f32>) -> Result<()> {
        let h = self.model.vision_encode(&features.cast())?;
        self.feed_core(&h)?;
        Ok(())
    }

    fn feed_input_unit(&mut self, unit: TokenId) -> Result<TokenId> {
        let h = self.model.bottom_forward(&[unit], &mut self.cache.bottom_input)?;
        let id = self.ctc_argmax(&h)?;
        if !(self.model.config().remove_input_blanks && self.model.vocab().is_blank(id)) {
            self.feed_core(&h)?;
        }
        Ok(id)
    }

    fn feed_context_text(&mut self, ids: &[TokenId]) -> Result<()> {
        if !ids.is_empty() {
            let rows = self.model.embed(ids)?;
            self.feed_core(&rows)?;
        }
        Ok(())
    }

    fn feed_generated_text(&mut self, id: TokenId) -> Result<()> {
        let rows = self.model.embed(&[id])?;
        let h = self.feed_core(&rows)?;
        self.model.push_text(&mut self.cache.text, &h)
    }

    fn text_logits(&self) -> Result<Vec<f64>> {
        self.logits
            .as_ref()
            .map(|l| l.iter().map(|v| v.f64()).collect())
            .ok_or_else(|| OmniError::Scheduling("text requested before any context".into()))
    }

    fn text_len(&self) -> usize {
        self.cache.text.len()
    }

    fn unit_logits(&mut self, window: (usize, usize)) -> Result<Vec<f64>> {
        let row = self
            .pending_top
            .take()
            .ok_or_else(|| OmniError::Scheduling("unit requested before the previous unit was encoded".into()))?;
        let d = row.len();
        let rows = Tensor::matrix(1, d, row)?;
        let logits = self
            .model
            .top_forward_windows(&rows, &self.cache.text, &[window], &mut self.cache.top)?;
        Ok(logits.iter().map(|v| v.f64()).collect())
    }

    fn feed_generated_unit(&mut self, unit: TokenId) -> Result<TokenId> {
        let h = self.model.bottom_forward(&[unit], &mut self.cache.bottom_generated)?;
        let id = self.ctc_argmax(&h)?;
        self.pending_top = Some(self.model.top_input_row(unit, h.row(0))?);
        Ok(id)
    }
}

/// Scripted backend: answers `response` then eos regardless of context; the
/// input CTC path is given; each generated unit is recognized as the text token
/// at the end of the window it was generated with, and the unit-eos logit wins
/// once the window reaches the eos position.
#[derive(Clone, Debug)]
pub struct MockBackend {
    vocab: MultimodalVocab,
    response: Vec<TokenId>,
    input_path: Vec<TokenId>,
    inputs_seen: usize,
    generated: Vec<TokenId>,
    text_fed: usize,
    last_window_token: Option<TokenId>,
    /// Every fusion window requested, with the text length at that moment.
    pub windows: Vec<((usize, usize), usize)>,
}

impl MockBackend {
    pub fn new(vocab: MultimodalVocab, response: Vec<TokenId>, input_path: Vec<TokenId>) -> Self {
        MockBackend {
            vocab,
            response,
            input_path,
            inputs_seen: 0,
            generated: Vec::new(),
            text_fed: 0,
            last_window_token: None,
            windows: Vec::new(),
        }
    }

    /// The unit the mock speaks for text token `t`.
    pub fn unit_for(&self, t: TokenId) -> TokenId {
        self.vocab.text_size() + t % self.vocab.unit_size()
    }
}

impl StreamBackend for MockBackend {
    fn vocab(&self) -> &MultimodalVocab {
        &self.vocab
    }

    fn feed_vision(&mut self, _features: &Tensor<f32>) -> Result<()> {
        Ok(())
    }

    fn feed_input_unit(&mut self, unit: TokenId) -> Result<TokenId> {
        self.vocab.expect(unit, TokenKind::Unit)?;
        let id = self.input_path.get(self.inputs_seen).copied().unwrap_or(self.vocab.blank_id());
        self.inputs_seen += 1;
        Ok(id)
    }

    fn feed_context_text(&mut self, _ids: &[TokenId]) -> Result<()> {
        Ok(())
    }

    fn feed_generated_text(&mut self, id: TokenId) -> Result<()> {
        self.generated.push(id);
        self.text_fed += 1;
        Ok(())
    }

    fn text_logits(&self) -> Result<Vec<f64>> {
        let next = self.response.get(self.generated.len()).copied().unwrap_or(crate::vocab::EOS);
        let mut l = vec![0.0; self.vocab.text_size() as usize];
        l[next as usize] = 1.0;
        Ok(l)
    }

    fn text_len(&self) -> usize {
        self.text_fed
    }

    fn unit_logits(&mut self, window: (usize, usize)) -> Result<Vec<f64>> {
        self.windows.push((window, self.text_fed));
        if window.1 == 0 || window.1 > self.text_fed {
            return Err(OmniError::Scheduling(format!("mock window {window:?} beyond {} tokens", self.text_fed)));
        }
        let t = self.generated[window.1 - 1];
        let mut l = vec![0.0; self.vocab.unit_size() as usize + 1];
        if t == crate::vocab::EOS {
            *l.last_mut().unwrap() = 1.0;
        } else {
            l[(self.unit_for(t) - self.vocab.text_size()) as usize] = 1.0;
        }
        self.last_window_token = Some(t);
        Ok(l)
    }

    fn feed_generated_unit(&mut self, unit: TokenId) -> Result<TokenId> {
        self.vocab.expect(unit, TokenKind::Unit)?;
        Ok(self.last_window_token.unwrap_or(self.vocab.blank_id()))
    }
}
