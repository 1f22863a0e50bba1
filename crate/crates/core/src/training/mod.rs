//! Three-stage training with per-stage trainable groups.
//!
//! | stage | trains                               | loss                          |
//! |-------|--------------------------------------|-------------------------------|
//! | 1     | vision projection, text rows, core   | text cross-entropy            |
//! | 2     | speech rows, bottom + CTC, top + head | CTC + next-unit cross-entropy |
//! | 3     | text rows, core                      | text cross-entropy            |

mod gradcheck;
mod losses;
mod optim;

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, CorpusRecord, Family, Task, World};
use crate::error::{OmniError, Result};
use crate::eval::{eval_asr, eval_exact_match, eval_unit_consistency, EvalResult, Metric};
use crate::model::{group_of, ModelConfig, OmniModel, ParamGroup};
use crate::scalar::Scalar;
use crate::streaming::SessionConfig;

pub use gradcheck::{ctc_gradcheck, full_model_gradcheck, FullModelCheck, GroupedReport};
pub use losses::LossTerms;
pub use optim::{clip_global_norm, AdamW};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
    Three,
}

impl TryFrom<u8> for Stage {
    type Error = OmniError;

    fn try_from(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            3 => Ok(Stage::Three),
            _ => Err(OmniError::Config(format!("stage must be 1, 2 or 3 (got {n})"))),
        }
    }
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        s.number()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::One, Stage::Two, Stage::Three];

    pub fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
            Stage::Three => 3,
        }
    }

    pub fn trains(self, group: ParamGroup) -> bool {
        use ParamGroup::*;
        match self {
            Stage::One => matches!(group, Vision | TextEmbedding | Core),
            Stage::Two => matches!(group, SpeechEmbedding | Bottom | Top),
            Stage::Three => matches!(group, Core),
        }
    }

    pub(crate) fn trains_vision(self) -> bool {
        self.trains(ParamGroup::Vision)
    }

    pub fn default_tasks(self) -> Vec<Task> {
        match self {
            Stage::One => vec![Task::T2T, Task::VT2T],
            Stage::Two => vec![Task::Asr, Task::S2S, Task::VS2S],
            Stage::Three => vec![Task::T2T, Task::S2T, Task::S2S, Task::VT2T, Task::VS2T, Task::VS2S],
        }
    }
}

/// Optimizer budget and loss weights of one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    /// The rate decays (cosine) to `lr * lr_floor` by the last step; 1 keeps it
    /// constant.
    pub lr_floor: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip (0 disables).
    pub clip: f64,
    pub lambda_ctc: f64,
    pub lambda_unit: f64,
    pub lambda_text: f64,
    /// Training tasks; the stage's defaults when absent.
    pub tasks: Option<Vec<Task>>,
    /// Dev records per metric at the end of the stage (0 skips evaluation).
    pub eval_samples: usize,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            steps: 300,
            batch_size: 16,
            lr: 3e-3,
            warmup: 30,
            lr_floor: 0.1,
            weight_decay: 0.01,
            clip: 1.0,
            lambda_ctc: 1.0,
            lambda_unit: 1.0,
            lambda_text: 1.0,
            tasks: None,
            eval_samples: 200,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OmniError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lr_floor > 0.0 && self.lr_floor <= 1.0) {
            return bad("lr_floor must be in (0, 1]");
        }
        for l in [self.lambda_ctc, self.lambda_unit, self.lambda_text, self.weight_decay, self.clip] {
            if !(l >= 0.0 && l.is_finite()) {
                return bad("loss weights, weight decay and clip must be non-negative");
            }
        }
        if self.tasks.as_ref().is_some_and(|t| t.is_empty()) {
            return bad("empty task mix");
        }
        Ok(())
    }

    pub fn tasks(&self, stage: Stage) -> Vec<Task> {
        self.tasks.clone().unwrap_or_else(|| stage.default_tasks())
    }
}

/// Contents of a training configuration file (TOML).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: ModelConfig::default(),
            stage1: StageConfig {
                steps: 400,
                lr: 3e-3,
                ..StageConfig::default()
            },
            stage2: StageConfig {
                steps: 1000,
                lr: 3e-3,
                ..StageConfig::default()
            },
            stage3: StageConfig {
                steps: 300,
                lr: 1e-3,
                ..StageConfig::default()
            },
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| OmniError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| OmniError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        for s in Stage::ALL {
            self.stage(s).validate()?;
        }
        Ok(())
    }

    pub fn stage(&self, s: Stage) -> &StageConfig {
        match s {
            Stage::One => &self.stage1,
            Stage::Two => &self.stage2,
            Stage::Three => &self.stage3,
        }
    }

    pub fn stage_mut(&mut self, s: Stage) -> &mut StageConfig {
        match s {
            Stage::One => &mut self.stage1,
            Stage::Two => &mut self.stage2,
            Stage::Three => &mut self.stage3,
        }
    }
}

/// One line of a training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReportLine {
    Step {
        stage: Stage,
        step: usize,
        loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        text: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ctc: Option<f64>,
        #[serde(skip_serializing_if = "Option::is_none")]
        unit: Option<f64>,
        lr: f64,
        grad_norm: f64,
        samples: usize,
        skipped: usize,
    },
    Stage {
        stage: Stage,
        steps: usize,
        first_loss: f64,
        final_loss: f64,
        skipped: usize,
        metrics: Vec<EvalResult>,
        wall_ms: u64,
    },
}

impl ReportLine {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report lines serialize")
    }
}

/// Everything one stage reported.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub lines: Vec<ReportLine>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.lines
            .iter()
            .filter_map(|l| match l {
                ReportLine::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn summary(&self) -> Option<&ReportLine> {
        self.lines.iter().rev().find(|l| matches!(l, ReportLine::Stage { .. }))
    }

    pub fn metric(&self, task: &str, metric: Metric) -> Option<f64> {
        match self.summary()? {
            ReportLine::Stage { metrics, .. } => {
                metrics.iter().find(|m| m.task == task && m.metric == metric).map(|m| m.value)
            }
            _ => None,
        }
    }

    pub fn write_jsonl(&self, out: &mut dyn Write) -> Result<()> {
        for l in &self.lines {
            writeln!(out, "{}", l.to_json_line())?;
        }
        Ok(())
    }
}

/// Records a stage trains and evaluates on.
#[derive(Clone, Copy)]
pub struct TrainData<'a> {
    pub world: &'a World,
    pub train: &'a [CorpusRecord],
    pub dev: &'a [CorpusRecord],
}

impl<'a> From<&'a Corpus> for TrainData<'a> {
    fn from(c: &'a Corpus) -> Self {
        TrainData {
            world: &c.world,
            train: &c.train,
            dev: &c.dev,
        }
    }
}

fn check_fit(config: &ModelConfig, world: &World) -> Result<()> {
    if config.text_size != world.vocab.text_size()
        || config.unit_size != world.vocab.unit_size()
        || config.vision_tokens_per_image != world.vision_tokens
        || config.vision_feature_dim != world.vision_dim
    {
        return Err(OmniError::Config(format!(
            "model vocabulary/vision shape ({}+{}, {}x{}) does not match the corpus ({}+{}, {}x{})",
            config.text_size,
            config.unit_size,
            config.vision_tokens_per_image,
            config.vision_feature_dim,
            world.vocab.text_size(),
            world.vocab.unit_size(),
            world.vision_tokens,
            world.vision_dim
        )));
    }
    Ok(())
}

/// Shuffled batches of similar length: records are shuffled, cut into pools
/// of 16 batches, sorted by length within a pool, and the batches shuffled.
fn length_batches(lens: &[usize], batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.shuffle(rng);
    let mut batches = Vec::new();
    for pool in order.chunks(batch * 16) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| lens[i]);
        batches.extend(pool.chunks(batch).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

/// Runs one stage on `model` in place.
pub fn train_stage<T: Scalar>(
    model: &mut OmniModel<T>,
    stage: Stage,
    cfg: &StageConfig,
    data: TrainData<'_>,
    seed: u64,
    sink: &mut dyn FnMut(&ReportLine),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_fit(model.config(), data.world)?;
    let started = Instant::now();
    let tasks = cfg.tasks(stage);
    if tasks.is_empty() {
        return Err(OmniError::Config("empty task mix".into()));
    }
    let records: Vec<&CorpusRecord> = data.train.iter().filter(|r| tasks.contains(&r.task)).collect();
    if records.is_empty() {
        return Err(OmniError::Corpus(format!("no training records for stage {stage} tasks {tasks:?}")));
    }
    if stage == Stage::One && !records.iter().any(|r| r.task.has_vision()) {
        return Err(OmniError::Corpus("stage 1 needs vision records".into()));
    }
    let samples = records
        .par_iter()
        .map(|r| losses::prepare(model, data.world, r, stage))
        .collect::<Result<Vec<_>>>()?;
    let lens: Vec<usize> = samples.iter().map(|s| s.len).collect();

    let named = model.params.named();
    let trainable: Vec<(usize, String)> = named
        .iter()
        .enumerate()
        .map(|(i, (n, _))| Ok((i, n.clone(), group_of(n)?)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|(_, _, g)| stage.trains(*g))
        .map(|(i, n, _)| (i, n))
        .collect();
    let index: HashMap<String, usize> = trainable.iter().enumerate().map(|(k, (_, n))| (n.clone(), k)).collect();
    let sizes: Vec<usize> = trainable.iter().map(|(i, _)| named[*i].1.len()).collect();
    let decay: Vec<bool> = trainable.iter().map(|(i, _)| named[*i].1.shape().len() == 2).collect();
    drop(named);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, cfg.warmup, &sizes).with_cosine(cfg.steps, cfg.lr_floor);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5eed_0000 + stage.number() as u64));
    let mut queue: Vec<Vec<usize>> = Vec::new();
    let mut report = TrainReport::default();
    let mut skipped_total = 0;
    let mut first_loss = f64::NAN;
    let mut recent: Vec<f64> = Vec::new();
    for step in 0..cfg.steps {
        if queue.is_empty() {
            queue = length_batches(&lens, cfg.batch_size, &mut rng);
            queue.reverse();
        }
        let batch = queue.pop().expect("refilled");
        let outs = {
            let m: &OmniModel<T> = model;
            batch
                .par_iter()
                .map(|&i| losses::sample_grads(m, &samples[i], stage, cfg, &index, sizes.len()))
                .collect::<Result<Vec<_>>>()?
        };
        let mut grads: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        let mut sums = [0.0f64; 3];
        let mut counts = [0usize; 3];
        let mut used = 0usize;
        let mut skipped = 0usize;
        // tensors no sample reached are left alone, weight decay included
        let mut touched = vec![false; sizes.len()];
        for o in &outs {
            if o.infeasible {
                skipped += 1;
                log::warn!("stage {stage} step {step}: infeasible CTC target skipped");
            }
            if o.terms.is_empty() {
                continue;
            }
            used += 1;
            for (k, t) in [o.terms.text, o.terms.ctc, o.terms.unit].iter().enumerate() {
                if let Some(v) = t {
                    sums[k] += v;
                    counts[k] += 1;
                }
            }
            for ((acc, g), t) in grads.iter_mut().zip(&o.grads).zip(&mut touched) {
                if let Some(g) = g {
                    *t = true;
                    acc.iter_mut().zip(g).for_each(|(a, x)| *a += x);
                }
            }
        }
        skipped_total += skipped;
        if used == 0 {
            continue;
        }
        let inv = 1.0 / used as f64;
        grads.iter_mut().flatten().for_each(|g| *g *= inv);
        let grad_norm = clip_global_norm(&mut grads, cfg.clip);
        if !grad_norm.is_finite() {
            return Err(OmniError::Numeric(format!("non-finite gradient at stage {stage} step {step}")));
        }
        let lr = opt.current_lr();
        {
            let mut named = model.params.named_mut();
            let mut params: Vec<&mut crate::numerics::Tensor<T>> = Vec::with_capacity(trainable.len());
            let mut want = trainable.iter().map(|(i, _)| *i).peekable();
            for (i, (_, t)) in named.iter_mut().enumerate() {
                if want.peek() == Some(&i) {
                    want.next();
                    params.push(t);
                }
            }
            let decay: Vec<bool> = decay.iter().zip(&touched).map(|(d, t)| *d && *t).collect();
            opt.update(&mut params, &grads, &decay);
        }
        let mean = |k: usize| (counts[k] > 0).then(|| sums[k] / counts[k] as f64);
        let (text, ctc, unit) = (mean(0), mean(1), mean(2));
        let loss = text.unwrap_or(0.0) + ctc.unwrap_or(0.0) + unit.unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(OmniError::Numeric(format!("non-finite loss at stage {stage} step {step}")));
        }
        if first_loss.is_nan() {
            first_loss = loss;
        }
        recent.push(loss);
        let line = ReportLine::Step {
            stage,
            step,
            loss,
            text,
            ctc,
            unit,
            lr,
            grad_norm,
            samples: used,
            skipped,
        };
        sink(&line);
        report.lines.push(line);
    }
    let tail = &recent[recent.len().saturating_sub(10)..];
    let final_loss = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().sum::<f64>() / tail.len() as f64
    };
    let metrics = if cfg.eval_samples > 0 {
        stage_metrics(model, stage, data, cfg.eval_samples)?
    } else {
        Vec::new()
    };
    let line = ReportLine::Stage {
        stage,
        steps: cfg.steps,
        first_loss,
        final_loss,
        skipped: skipped_total,
        metrics,
        wall_ms: started.elapsed().as_millis() as u64,
    };
    sink(&line);
    report.lines.push(line);
    Ok(report)
}

fn dev_of<'a>(dev: &'a [CorpusRecord], pred: impl Fn(&CorpusRecord) -> bool, limit: usize) -> Vec<&'a CorpusRecord> {
    dev.iter().filter(|r| pred(r)).take(limit).collect()
}

/// End-of-stage dev metrics. Empty record sets are left out.
pub fn stage_metrics<T: Scalar>(
    model: &OmniModel<T>,
    stage: Stage,
    data: TrainData<'_>,
    limit: usize,
) -> Result<Vec<EvalResult>> {
    let shared = Arc::new(model.clone());
    let session = SessionConfig {
        wait_k: model.config().wait_k,
        window: model.config().fusion_window,
        max_units_per_token: model.config().max_units_per_token,
        ..SessionConfig::default()
    };
    let mut out = Vec::new();
    let exact = |label: &str, recs: Vec<&CorpusRecord>, out: &mut Vec<EvalResult>| -> Result<()> {
        if !recs.is_empty() {
            out.push(eval_exact_match(&shared, data.world, &recs, label, &session)?);
        }
        Ok(())
    };
    match stage {
        Stage::One => {
            exact("T2T", dev_of(data.dev, |r| r.task == Task::T2T, limit), &mut out)?;
            exact("VT2T", dev_of(data.dev, |r| r.task == Task::VT2T, limit), &mut out)?;
        }
        Stage::Two => {
            let asr = dev_of(data.dev, |r| r.task == Task::Asr, limit);
            if !asr.is_empty() {
                out.push(eval_asr(model, &asr)?);
            }
            let recs = dev_of(data.dev, |r| r.task.speech_out(), limit);
            let samples = recs
                .iter()
                .map(|r| losses::prepare(model, data.world, r, stage))
                .collect::<Result<Vec<_>>>()?;
            let (hit, total) = losses::unit_accuracy(model, &samples)?;
            if total > 0 {
                out.push(EvalResult {
                    task: "speech_out".into(),
                    metric: Metric::UnitAccuracy,
                    value: hit as f64 / total as f64,
                    samples: samples.len(),
                });
            }
            if !recs.is_empty() {
                out.push(eval_unit_consistency(&shared, data.world, &recs, "speech_out", &session)?);
            }
        }
        Stage::Three => {
            for fam in [Family::Echo, Family::Recall, Family::Vision] {
                for (suffix, speech_in) in [("text_in", false), ("speech_in", true)] {
                    let recs = dev_of(data.dev, |r| r.family == fam && r.task.speech_in() == speech_in, limit);
                    exact(&format!("{}_{suffix}", fam.name()), recs, &mut out)?;
                }
            }
            let recs = dev_of(data.dev, |r| r.task.speech_out(), limit);
            if !recs.is_empty() {
                out.push(eval_unit_consistency(&shared, data.world, &recs, "speech_out", &session)?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
