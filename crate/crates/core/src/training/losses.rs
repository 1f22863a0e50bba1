//! Per-sample losses. Each sample gets its own graph; trainable tensors enter
//! as parameters, everything else as constants.

use std::collections::HashMap;

use crate::ctc::{ctc_loss_node, greedy_decode, remove_blanks};
use crate::data::{CorpusRecord, Task, World};
use crate::error::{OmniError, Result};
use crate::model::{fusion_window, BottomVars, OmniModel, TopInput};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::vocab::{TokenId, BOS, EOS};

use super::{Stage, StageConfig};

pub(crate) enum VisionInput<T> {
    /// Raw features; the projection is trained.
    Raw(Tensor<T>),
    /// Projected once with the frozen projection.
    Encoded(Tensor<T>),
}

/// A corpus record with the frozen parts of its forward pass precomputed.
pub(crate) struct Sample<T> {
    pub task: Task,
    pub vision: Option<VisionInput<T>>,
    /// Frozen bottom-stack rows of the input speech (stages 1 and 3).
    pub speech_h: Option<Tensor<T>>,
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
    pub input_units: Vec<TokenId>,
    /// What the input speech says.
    pub transcript: Vec<TokenId>,
    pub target_units: Vec<TokenId>,
    /// Length key for batching.
    pub len: usize,
}

/// Bottom-stack rows of input speech as the core sees them.
pub(crate) fn input_rows<T: Scalar>(model: &OmniModel<T>, units: &[TokenId]) -> Result<Tensor<T>> {
    let mut cache = model.new_cache();
    let h = model.bottom_forward(units, &mut cache.bottom_input)?;
    if model.config().remove_input_blanks {
        let align = greedy_decode(&model.ctc_logits(&h)?, model.vocab())?;
        remove_blanks(&h, &align)
    } else {
        Ok(h)
    }
}

pub(crate) fn prepare<T: Scalar>(
    model: &OmniModel<T>,
    world: &World,
    r: &CorpusRecord,
    stage: Stage,
) -> Result<Sample<T>> {
    let c = model.config();
    let vision = match r.features(c.vision_tokens_per_image, c.vision_feature_dim)? {
        None => None,
        Some(f) if stage.trains_vision() => Some(VisionInput::Raw(f.cast())),
        Some(f) => Some(VisionInput::Encoded(model.vision_encode(&f.cast())?)),
    };
    let input_units = r.input_units.clone().unwrap_or_default();
    let speech_h = if r.task.speech_in() && stage != Stage::Two {
        Some(input_rows(model, &input_units)?)
    } else {
        None
    };
    let transcript = match r.task {
        Task::Asr => r.target_text.clone(),
        t if t.speech_in() => world.codec.decode(&input_units)?,
        _ => Vec::new(),
    };
    let prompt = r.input_text.clone().unwrap_or_default();
    let target_units = r.target_units.clone().unwrap_or_default();
    let len = c.vision_tokens_per_image * usize::from(vision.is_some())
        + input_units.len()
        + prompt.len()
        + r.target_text.len()
        + target_units.len();
    Ok(Sample {
        task: r.task,
        vision,
        speech_h,
        prompt,
        target: r.target_text.clone(),
        input_units,
        transcript,
        target_units,
        len,
    })
}

/// Loss terms of one sample (already weighted).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub text: Option<f64>,
    pub ctc: Option<f64>,
    pub unit: Option<f64>,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.text.unwrap_or(0.0) + self.ctc.unwrap_or(0.0) + self.unit.unwrap_or(0.0)
    }

    pub fn is_empty(&self) -> bool {
        self.text.is_none() && self.ctc.is_none() && self.unit.is_none()
    }
}

pub(crate) struct SampleGrads {
    pub terms: LossTerms,
    /// Gradient per trainable tensor (indexed like the trainable list).
    pub grads: Vec<Option<Vec<f64>>>,
    /// CTC target could not be emitted from the input length.
    pub infeasible: bool,
}

/// Binds model tensors on `g`: trainable ones (by name) as parameters.
struct Binder<'a> {
    index: &'a HashMap<String, usize>,
    bound: Vec<(usize, Var)>,
}

impl Binder<'_> {
    fn bind<T: Scalar>(&mut self, g: &mut Graph<T>, name: String, t: &Tensor<T>) -> Var {
        match self.index.get(&name) {
            Some(&i) => {
                let v = g.param(t.clone());
                self.bound.push((i, v));
                v
            }
            None => g.constant(t.clone()),
        }
    }
}

/// Next-token cross-entropy over the target given the sample's context. With
/// `memory`, also returns the in-graph `H^T` (see [`text_memory`]).
fn text_loss<T: Scalar>(
    model: &OmniModel<T>,
    g: &mut Graph<T>,
    b: &mut Binder<'_>,
    s: &Sample<T>,
    memory: bool,
) -> Result<(Var, Option<Var>)> {
    let cv = model.bind_core_with(&mut |n, t| b.bind(g, n, t));
    let mut parts = Vec::new();
    match &s.vision {
        Some(VisionInput::Raw(f)) => {
            let vv = model.bind_vision_with(&mut |n, t| b.bind(g, n, t));
            parts.push(model.graph_vision(g, &vv, f)?);
        }
        Some(VisionInput::Encoded(h)) => parts.push(g.constant(h.clone())),
        None => {}
    }
    if let Some(h) = &s.speech_h {
        if h.rows() > 0 {
            parts.push(g.constant(h.clone()));
        }
    }
    let before = parts.iter().map(|&p| g.shape(p)[0]).sum::<usize>() + s.prompt.len();
    let mut ids = s.prompt.clone();
    ids.push(BOS);
    ids.extend(&s.target);
    if memory {
        // causal: the trailing eos leaves the earlier rows untouched
        ids.push(EOS);
    }
    parts.push(model.graph_text_embed(g, &cv, &ids)?);
    let ctx = g.concat_rows(&parts)?;
    let h = model.graph_core(g, &cv, ctx)?;
    let n = s.target.len();
    let rows: Vec<usize> = (before..=before + n).collect();
    let hs = g.select_rows(h, &rows)?;
    let logits = model.graph_text_logits(g, &cv, hs)?;
    let mut targets: Vec<Option<usize>> = s.target.iter().map(|&t| Some(t as usize)).collect();
    targets.push(Some(EOS as usize));
    let loss = g.cross_entropy(logits, &targets)?;
    let mem = if memory {
        let rows: Vec<usize> = (before + 1..=before + n + 1).collect();
        Some(g.select_rows(h, &rows)?)
    } else {
        None
    };
    Ok((loss, mem))
}

/// `H^T` for a target through the (frozen) core: hidden states at the inputs
/// of every target token and of eos, given the sample's context.
fn text_memory<T: Scalar>(model: &OmniModel<T>, s: &Sample<T>, speech: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut cache = model.new_cache();
    match &s.vision {
        Some(VisionInput::Encoded(h)) => {
            model.core_forward(h, &mut cache.core)?;
        }
        Some(VisionInput::Raw(f)) => {
            model.core_forward(&model.vision_encode(f)?, &mut cache.core)?;
        }
        None => {}
    }
    if let Some(h) = speech.or(s.speech_h.as_ref()) {
        if h.rows() > 0 {
            model.core_forward(h, &mut cache.core)?;
        }
    }
    let mut ids = s.prompt.clone();
    ids.push(BOS);
    model.core_forward(&model.embed(&ids)?, &mut cache.core)?;
    let mut gen = s.target.clone();
    gen.push(EOS);
    Ok(model.core_forward(&model.embed(&gen)?, &mut cache.core)?.hidden)
}

/// Teacher-forced fusion windows for `units` spoken for a `text_len`-token
/// response: top position `p` uses the greedy CTC count over units `1..=p`,
/// capped at the eos position.
pub(crate) fn teacher_windows<T: Scalar>(
    model: &OmniModel<T>,
    unit_h: &Tensor<T>,
    text_len: usize,
) -> Result<Vec<(usize, usize)>> {
    let align = greedy_decode(&model.ctc_logits(unit_h)?, model.vocab())?;
    (0..=align.len())
        .map(|p| fusion_window(align.count_at(p).min(text_len), model.config().fusion_window, text_len + 1))
        .collect()
}

/// Next-unit targets: local unit indices, then unit-eos.
pub(crate) fn unit_targets<T: Scalar>(model: &OmniModel<T>, units: &[TokenId]) -> Result<Vec<Option<usize>>> {
    let mut t = units
        .iter()
        .map(|&u| Ok(Some(model.vocab().unit_index(u)? as usize)))
        .collect::<Result<Vec<_>>>()?;
    t.push(Some(model.config().unit_eos()));
    Ok(t)
}

/// Teacher-forced next-unit cross-entropy of the target speech given `H^T`.
fn unit_loss<T: Scalar>(model: &OmniModel<T>, g: &mut Graph<T>, b: &mut Binder<'_>, s: &Sample<T>, text: Var) -> Result<Var> {
    let bv = model.bind_bottom_with(&mut |n, t| b.bind(g, n, t));
    unit_loss_with(model, g, b, &bv, s, text)
}

fn unit_loss_with<T: Scalar>(
    model: &OmniModel<T>,
    g: &mut Graph<T>,
    b: &mut Binder<'_>,
    bv: &BottomVars,
    s: &Sample<T>,
    text: Var,
) -> Result<Var> {
    let hu = model.graph_bottom(g, bv, &s.target_units)?;
    let windows = teacher_windows(model, g.value(hu), s.target.len())?;
    let inputs = match model.config().top_input {
        TopInput::BottomStack => hu,
        TopInput::Embedding => model.graph_unit_embed(g, bv, &s.target_units)?,
    };
    let tv = model.bind_top_with(&mut |n, t| b.bind(g, n, t));
    let logits = model.graph_top(g, &tv, Some(inputs), text, &windows)?;
    g.cross_entropy(logits, &unit_targets(model, &s.target_units)?)
}

/// Loss of one sample under a stage. `index` maps trainable tensor names to
/// their position in the gradient list of length `n_trainable`.
pub(crate) fn sample_grads<T: Scalar>(
    model: &OmniModel<T>,
    s: &Sample<T>,
    stage: Stage,
    cfg: &StageConfig,
    index: &HashMap<String, usize>,
    n_trainable: usize,
) -> Result<SampleGrads> {
    let mut g = Graph::new();
    let mut b = Binder {
        index,
        bound: Vec::new(),
    };
    let mut terms = LossTerms::default();
    let mut weighted: Vec<(Var, T)> = Vec::new();
    let mut infeasible = false;
    match stage {
        Stage::One | Stage::Three => {
            // stage 3 speech-output samples also push the unit loss through the
            // frozen top stack into the core, so H^T stays readable
            let unit = stage == Stage::Three && s.task.speech_out() && cfg.lambda_unit > 0.0;
            if cfg.lambda_text > 0.0 || unit {
                let (l, mem) = text_loss(model, &mut g, &mut b, s, unit)?;
                if cfg.lambda_text > 0.0 {
                    terms.text = Some(cfg.lambda_text * g.value(l).item()?.f64());
                    weighted.push((l, T::of(cfg.lambda_text)));
                }
                if let Some(text) = mem {
                    let l = unit_loss(model, &mut g, &mut b, s, text)?;
                    terms.unit = Some(cfg.lambda_unit * g.value(l).item()?.f64());
                    weighted.push((l, T::of(cfg.lambda_unit)));
                }
            }
        }
        Stage::Two => {
            let bv = model.bind_bottom_with(&mut |n, t| b.bind(&mut g, n, t));
            let mut speech = None;
            if !s.input_units.is_empty() {
                let h = model.graph_bottom(&mut g, &bv, &s.input_units)?;
                if cfg.lambda_ctc > 0.0 {
                    let logits = model.graph_ctc_logits(&mut g, &bv, h)?;
                    match ctc_loss_node(&mut g, logits, &s.transcript, model.vocab())? {
                        Some(l) => {
                            let w = cfg.lambda_ctc / s.transcript.len().max(1) as f64;
                            terms.ctc = Some(w * g.value(l).item()?.f64());
                            weighted.push((l, T::of(w)));
                        }
                        None => infeasible = true,
                    }
                }
                speech = Some(g.value(h).clone());
            }
            if s.task.speech_out() && cfg.lambda_unit > 0.0 {
                let speech = match speech {
                    Some(h) if model.config().remove_input_blanks => {
                        let align = greedy_decode(&model.ctc_logits(&h)?, model.vocab())?;
                        Some(remove_blanks(&h, &align)?)
                    }
                    other => other,
                };
                let ht = text_memory(model, s, speech.as_ref())?;
                let text = g.constant(ht);
                let l = unit_loss_with(model, &mut g, &mut b, &bv, s, text)?;
                terms.unit = Some(cfg.lambda_unit * g.value(l).item()?.f64());
                weighted.push((l, T::of(cfg.lambda_unit)));
            }
        }
    }
    let mut grads = vec![None; n_trainable];
    if weighted.is_empty() {
        return Ok(SampleGrads {
            terms,
            grads,
            infeasible,
        });
    }
    let loss = g.weighted_sum(&weighted)?;
    if !g.value(loss).item()?.f64().is_finite() {
        return Err(OmniError::Numeric(format!("non-finite loss on a {} sample", s.task)));
    }
    g.backward(loss)?;
    for (i, v) in b.bound {
        if let Some(gr) = g.take_grad(v) {
            let gr: Vec<f64> = gr.iter().map(|x| x.f64()).collect();
            match &mut grads[i] {
                Some(acc) => acc.iter_mut().zip(&gr).for_each(|(a, x)| *a += x),
                slot => *slot = Some(gr),
            }
        }
    }
    Ok(SampleGrads {
        terms,
        grads,
        infeasible,
    })
}

/// Teacher-forced next-unit accuracy of the top stack on speech-output records
/// (targets include unit-eos).
pub(crate) fn unit_accuracy<T: Scalar>(model: &OmniModel<T>, samples: &[Sample<T>]) -> Result<(usize, usize)> {
    let mut hit = 0;
    let mut total = 0;
    for s in samples.iter().filter(|s| s.task.speech_out()) {
        let mut g = Graph::new();
        let speech = if s.input_units.is_empty() {
            None
        } else {
            Some(input_rows(model, &s.input_units)?)
        };
        let ht = text_memory(model, s, speech.as_ref())?;
        let text = g.constant(ht);
        let bv = model.bind_bottom(&mut g, false);
        let hu = model.graph_bottom(&mut g, &bv, &s.target_units)?;
        let windows = teacher_windows(model, g.value(hu), s.target.len())?;
        let inputs = match model.config().top_input {
            TopInput::BottomStack => hu,
            TopInput::Embedding => model.graph_unit_embed(&mut g, &bv, &s.target_units)?,
        };
        let tv = model.bind_top(&mut g, false);
        let logits = model.graph_top(&mut g, &tv, Some(inputs), text, &windows)?;
        let targets = unit_targets(model, &s.target_units)?;
        let l = g.value(logits);
        for (r, t) in targets.iter().enumerate() {
            let row = l.row(r);
            let best = crate::numerics::kernels::argmax(row);
            hit += usize::from(Some(best) == *t);
            total += 1;
        }
    }
    Ok((hit, total))
}
