//! Simultaneous ASR, text and speech generation as a lazy event stream.
//!
//! Per generated text token the session (1) emits the token, (2) feeds it back
//! to the core so its representation is available for fusion, and (3) once K
//! tokens exist, speaks the token K-1 places behind: units are generated until
//! the CTC decoder over the generated units recognizes one new symbol or the
//! per-token cap fires. After eos the lagged tokens are flushed and the top
//! stack runs with its window on the eos position until it emits unit-eos.

use std::collections::VecDeque;
use std::sync::mpsc::{sync_channel, Receiver};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::backend::StreamBackend;
use super::event::{EventKind, Payload, StreamEvent};
use super::route::Route;
use crate::ctc::CtcAlignment;
use crate::error::{OmniError, Result};
use crate::model::{fusion_window, FusionWindow};
use crate::numerics::kernels::argmax;
use crate::numerics::Tensor;
use crate::vocab::{TokenId, BOS, EOS};

#[derive(Clone, Debug)]
pub struct SessionConfig {
    pub wait_k: usize,
    pub window: FusionWindow,
    pub max_units_per_token: usize,
    pub max_text_tokens: usize,
    /// 0 selects greedy decoding.
    pub temperature: f64,
    pub seed: u64,
    pub emit_chunks: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            wait_k: 3,
            window: FusionWindow::Finite(5),
            max_units_per_token: 20,
            max_text_tokens: 32,
            temperature: 0.0,
            seed: 0,
            emit_chunks: true,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.wait_k == 0 {
            return Err(OmniError::Config("wait-k lag must be at least 1".into()));
        }
        if self.max_units_per_token == 0 || self.max_text_tokens == 0 {
            return Err(OmniError::Config("generation caps must be positive".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(OmniError::Config(format!("invalid temperature {}", self.temperature)));
        }
        Ok(())
    }
}

/// Session inputs; which of them are used is decided by the [`Route`].
#[derive(Clone, Debug, Default)]
pub struct SessionInput {
    pub vision: Option<Tensor<f32>>,
    pub units: Vec<TokenId>,
    pub text: Vec<TokenId>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Phase {
    Start,
    Input(usize),
    Prefill,
    Text,
    Speak { token: usize, units: Vec<TokenId>, flushing: bool },
    Flush,
    Final { units: Vec<TokenId> },
    Finish,
    Done,
}

pub struct Session<B> {
    backend: B,
    route: Route,
    config: SessionConfig,
    input: SessionInput,
    phase: Phase,
    queue: VecDeque<StreamEvent>,
    step: u64,
    started: Instant,
    rng: ChaCha8Rng,
    asr: CtcAlignment,
    /// Alignment over generated units; two blank sentinels precede them.
    generation: CtcAlignment,
    text: Vec<TokenId>,
    units: Vec<TokenId>,
    spoken: usize,
    forced: usize,
    /// Every fusion window used, as (start, end, text positions available).
    windows: Vec<(usize, usize, usize)>,
}

impl<B: StreamBackend> Session<B> {
    pub fn new(backend: B, route: Route, input: SessionInput, config: SessionConfig) -> Result<Self> {
        config.validate()?;
        let v = backend.vocab();
        if route.vision && input.vision.is_none() {
            return Err(OmniError::Config("route needs vision features".into()));
        }
        if route.speech_in {
            for &u in &input.units {
                v.expect(u, crate::vocab::TokenKind::Unit)?;
            }
        }
        if route.text_in {
            for &t in &input.text {
                v.expect(t, crate::vocab::TokenKind::Text)?;
            }
        }
        let blank = v.blank_id();
        let mut generation = CtcAlignment::new(blank);
        generation.push(blank);
        generation.push(blank);
        Ok(Session {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            backend,
            route,
            config,
            input,
            phase: Phase::Start,
            queue: VecDeque::new(),
            step: 0,
            started: Instant::now(),
            asr: CtcAlignment::new(blank),
            generation,
            text: Vec::new(),
            units: Vec::new(),
            spoken: 0,
            forced: 0,
            windows: Vec::new(),
        })
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn text(&self) -> &[TokenId] {
        &self.text
    }

    pub fn units(&self) -> &[TokenId] {
        &self.units
    }

    /// Generation alignment path including the two sentinels.
    pub fn generation_path(&self) -> &[TokenId] {
        self.generation.path()
    }

    /// Collapsed text recognized from the generated units.
    pub fn speech_text(&self) -> &[TokenId] {
        self.generation.text()
    }

    pub fn asr_text(&self) -> &[TokenId] {
        self.asr.text()
    }

    pub fn windows(&self) -> &[(usize, usize, usize)] {
        &self.windows
    }

    pub fn forced_advances(&self) -> usize {
        self.forced
    }

    /// Runs to completion, returning every event.
    pub fn collect_events(&mut self) -> Result<Vec<StreamEvent>> {
        let mut out = Vec::new();
        for e in self.by_ref() {
            out.push(e?);
        }
        Ok(out)
    }

    fn emit(&mut self, kind: EventKind, payload: Payload) {
        self.queue.push_back(StreamEvent {
            step: self.step,
            kind,
            payload,
            wall_ns: self.started.elapsed().as_nanos() as u64,
        });
        self.step += 1;
    }

    fn pick(&mut self, logits: &[f64]) -> Result<usize> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(OmniError::Numeric("non-finite logits during generation".into()));
        }
        if self.config.temperature == 0.0 {
            return Ok(argmax(logits));
        }
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|&l| ((l - m) / self.config.temperature).exp()).collect();
        let dist = WeightedIndex::new(&w).map_err(|e| OmniError::Numeric(e.to_string()))?;
        Ok(dist.sample(&mut self.rng))
    }

    /// Text positions completed so far for window purposes.
    fn completed(&self) -> usize {
        self.generation.count() + self.forced
    }

    fn window(&mut self, aligned: usize) -> Result<(usize, usize)> {
        let w = fusion_window(aligned, self.config.window, self.backend.text_len())?;
        self.windows.push((w.0, w.1, self.backend.text_len()));
        Ok(w)
    }

    fn chunk(&mut self, token: usize, units: Vec<TokenId>) {
        if self.config.emit_chunks && !units.is_empty() {
            self.emit(EventKind::SpeechChunk, Payload::Chunk { token, units });
        }
    }

    /// Generates and emits one unit; returns it and whether CTC recognized a
    /// new symbol with it.
    fn speak_one(&mut self, window: (usize, usize), allow_end: bool) -> Result<Option<(TokenId, bool)>> {
        let logits = self.backend.unit_logits(window)?;
        let unit_size = self.backend.vocab().unit_size() as usize;
        if logits.len() != unit_size + 1 {
            return Err(OmniError::dim("unit logits", &[logits.len()], &[unit_size + 1]));
        }
        let choice = if allow_end { self.pick(&logits)? } else { self.pick(&logits[..unit_size])? };
        if choice == unit_size {
            return Ok(None);
        }
        let unit = self.backend.vocab().unit_id(choice as u32)?;
        self.emit(EventKind::SpeechUnit, Payload::Unit(unit));
        let id = self.backend.feed_generated_unit(unit)?;
        self.units.push(unit);
        Ok(Some((unit, self.generation.push(id))))
    }

    fn advance(&mut self) -> Result<()> {
        match std::mem::replace(&mut self.phase, Phase::Done) {
            Phase::Start => {
                if self.route.vision {
                    let f = self.input.vision.clone().expect("checked in new");
                    self.backend.feed_vision(&f)?;
                }
                self.phase = if self.route.speech_in { Phase::Input(0) } else { Phase::Prefill };
            }
            Phase::Input(i) => {
                if i < self.input.units.len() {
                    let id = self.backend.feed_input_unit(self.input.units[i])?;
                    if self.asr.push(id) {
                        let partial = self.asr.text().to_vec();
                        self.emit(EventKind::AsrPartial, Payload::Text(partial));
                    }
                    self.phase = Phase::Input(i + 1);
                } else {
                    self.phase = Phase::Prefill;
                }
            }
            Phase::Prefill => {
                let mut ctx = if self.route.text_in { self.input.text.clone() } else { Vec::new() };
                ctx.push(BOS);
                self.backend.feed_context_text(&ctx)?;
                self.phase = Phase::Text;
            }
            Phase::Text => {
                let logits = self.backend.text_logits()?;
                let id = self.pick(&logits)? as TokenId;
                if id == EOS || self.text.len() >= self.config.max_text_tokens {
                    if id != EOS {
                        self.emit(
                            EventKind::Warning,
                            Payload::Warning(format!("text cap {} reached", self.config.max_text_tokens)),
                        );
                    }
                    let speaking = self.route.speech_out && self.text.len() >= self.config.wait_k;
                    if speaking {
                        // eos is not spoken; its representation anchors the final window
                        self.backend.feed_generated_text(EOS)?;
                        self.phase = Phase::Flush;
                    } else {
                        self.phase = Phase::Finish;
                    }
                    return Ok(());
                }
                self.text.push(id);
                self.emit(EventKind::TextToken, Payload::Token(id));
                self.backend.feed_generated_text(id)?;
                self.phase = if self.route.speech_out && self.text.len() >= self.config.wait_k {
                    Phase::Speak {
                        token: self.text.len() + 1 - self.config.wait_k,
                        units: Vec::new(),
                        flushing: false,
                    }
                } else {
                    Phase::Text
                };
            }
            Phase::Speak {
                token,
                mut units,
                flushing,
            } => {
                let aligned = self.completed().min(token - 1);
                let w = self.window(aligned)?;
                let (unit, recognized) = self.speak_one(w, false)?.expect("end excluded");
                units.push(unit);
                let capped = !recognized && units.len() >= self.config.max_units_per_token;
                if recognized || capped {
                    if capped {
                        self.forced += 1;
                        self.emit(
                            EventKind::Warning,
                            Payload::Warning(format!(
                                "token {token}: no symbol recognized within {} units, advancing",
                                self.config.max_units_per_token
                            )),
                        );
                    }
                    self.spoken = token;
                    self.chunk(token, units);
                    self.phase = if flushing { Phase::Flush } else { Phase::Text };
                } else {
                    self.phase = Phase::Speak { token, units, flushing };
                }
            }
            Phase::Flush => {
                self.phase = if self.spoken < self.text.len() {
                    Phase::Speak {
                        token: self.spoken + 1,
                        units: Vec::new(),
                        flushing: true,
                    }
                } else {
                    Phase::Final { units: Vec::new() }
                };
            }
            Phase::Final { mut units } => {
                let aligned = self.completed().min(self.text.len());
                let w = self.window(aligned)?;
                match self.speak_one(w, true)? {
                    None => {
                        self.chunk(self.text.len() + 1, units);
                        self.phase = Phase::Finish;
                    }
                    Some((unit, recognized)) => {
                        units.push(unit);
                        if recognized || units.len() >= self.config.max_units_per_token {
                            self.emit(
                                EventKind::Warning,
                                Payload::Warning("speech did not end after eos, stopping".into()),
                            );
                            self.chunk(self.text.len() + 1, units);
                            self.phase = Phase::Finish;
                        } else {
                            self.phase = Phase::Final { units };
                        }
                    }
                }
            }
            Phase::Finish => {
                let text = self.text.clone();
                let speech_text = self.generation.text().to_vec();
                self.emit(EventKind::Eos, Payload::Summary { text, speech_text });
                self.phase = Phase::Done;
            }
            Phase::Done => {}
        }
        Ok(())
    }
}

impl<B: StreamBackend> Iterator for Session<B> {
    type Item = Result<StreamEvent>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(e) = self.queue.pop_front() {
                return Some(Ok(e));
            }
            if self.phase == Phase::Done {
                return None;
            }
            if let Err(e) = self.advance() {
                self.phase = Phase::Done;
                return Some(Err(e));
            }
        }
    }
}

/// Runs a session on its own thread, handing events over a bounded queue; the
/// producer blocks while the queue is full.
pub fn spawn_session<B>(session: Session<B>, capacity: usize) -> (Receiver<Result<StreamEvent>>, JoinHandle<()>)
where
    B: StreamBackend + Send + 'static,
{
    let (tx, rx) = sync_channel(capacity);
    let handle = thread::spawn(move || {
        for e in session {
            if tx.send(e).is_err() {
                break;
            }
        }
    });
    (rx, handle)
}
