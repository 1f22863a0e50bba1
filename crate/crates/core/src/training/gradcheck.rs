//! Finite-difference checks of the CTC loss and of the whole model's loss.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::ctc::{ctc_loss, ctc_loss_node};
use crate::error::{OmniError, Result};
use crate::model::{fusion_window, group_of, ModelConfig, OmniModel, ParamGroup};
use crate::numerics::gradcheck::{check_gradients_with, GradCheckOptions, GradCheckReport};
use crate::numerics::{Graph, OpKind, Tensor, Var};
use crate::vocab::{TokenId, BOS, EOS, RESERVED_TEXT};

/// Worst relative error per parameter group, alongside the per-tensor report.
#[derive(Clone, Debug, Serialize)]
pub struct GroupedReport {
    pub groups: BTreeMap<String, f64>,
    pub tensors: GradCheckReport,
    pub passed: bool,
}

fn group_name(g: ParamGroup) -> &'static str {
    match g {
        ParamGroup::Vision => "vision",
        ParamGroup::TextEmbedding => "text_embedding",
        ParamGroup::Core => "core",
        ParamGroup::SpeechEmbedding => "speech_embedding",
        ParamGroup::Bottom => "bottom",
        ParamGroup::Top => "top",
    }
}

impl GroupedReport {
    fn new(tensors: GradCheckReport) -> Result<Self> {
        let mut groups = BTreeMap::new();
        for t in &tensors.groups {
            let e = groups.entry(group_name(group_of(&t.name)?).to_string()).or_insert(0.0f64);
            *e = e.max(t.max_rel_err);
        }
        Ok(GroupedReport {
            groups,
            passed: tensors.passed,
            tensors,
        })
    }

    pub fn worst(&self) -> f64 {
        self.tensors.worst()
    }
}

/// CTC loss gradient on random logits `[frames, width]` (last column is the
/// blank) against central differences.
pub fn ctc_gradcheck(
    frames: usize,
    width: usize,
    seed: u64,
    opts: &GradCheckOptions,
    fault: Option<OpKind>,
) -> Result<GradCheckReport> {
    if width < 2 {
        return Err(OmniError::Config("CTC check needs at least one label and the blank".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blank = (width - 1) as TokenId;
    // feasible target: at most half the frames, labels drawn from the non-blank columns
    let len = rng.random_range(1..=(frames / 2).max(1));
    let target: Vec<TokenId> = (0..len).map(|_| rng.random_range(0..blank)).collect();
    let data: Vec<f64> = (0..frames * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let params = vec![("logits".to_string(), Tensor::matrix(frames, width, data)?)];
    let loss = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
        let res = ctc_loss(g.value(v[0]).data(), width, &target, blank)?;
        let grad = res
            .grad
            .ok_or_else(|| OmniError::Numeric("gradcheck drew an infeasible CTC target".into()))?;
        g.custom_scalar(v[0], res.loss, grad)
    };
    check_gradients_with(&params, loss, opts, |g| {
        if let Some(k) = fault {
            g.inject_fault(k)
        }
    })
}

/// One random input for the whole-model loss.
struct Instance {
    features: Tensor<f64>,
    input_units: Vec<TokenId>,
    transcript: Vec<TokenId>,
    prompt: Vec<TokenId>,
    target: Vec<TokenId>,
    target_units: Vec<TokenId>,
    counts: Vec<usize>,
}

fn instance(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Instance {
    let text = |rng: &mut ChaCha8Rng| rng.random_range(RESERVED_TEXT..config.text_size);
    let unit = |rng: &mut ChaCha8Rng| config.text_size + rng.random_range(0..config.unit_size);
    let n_in = rng.random_range(3..=6);
    let n_units = rng.random_range(2..=5);
    let target: Vec<TokenId> = (0..rng.random_range(1..=3)).map(|_| text(rng)).collect();
    // nondecreasing alignment counts over the target units, capped at |X|
    let mut counts = vec![0];
    for _ in 0..n_units {
        let last = *counts.last().expect("seeded");
        counts.push((last + usize::from(rng.random_bool(0.5))).min(target.len()));
    }
    let n = config.vision_tokens_per_image * config.vision_feature_dim;
    Instance {
        features: Tensor::matrix(
            config.vision_tokens_per_image,
            config.vision_feature_dim,
            (0..n).map(|_| StandardNormal.sample(rng)).collect(),
        )
        .expect("sized"),
        input_units: (0..n_in).map(|_| unit(rng)).collect(),
        transcript: (0..rng.random_range(1..=2)).map(|_| text(rng)).collect(),
        prompt: (0..rng.random_range(0..=2)).map(|_| text(rng)).collect(),
        target,
        target_units: (0..n_units).map(|_| unit(rng)).collect(),
        counts,
    }
}

/// Text cross-entropy + CTC + next-unit cross-entropy through every module,
/// with `H^T` taken from the live core so gradients reach it from the top.
fn model_loss(model: &OmniModel<f64>, g: &mut Graph<f64>, vars: &HashMap<String, Var>, x: &Instance) -> Result<Var> {
    let mut get = |n: String, _: &Tensor<f64>| vars[&n];
    let vv = model.bind_vision_with(&mut get);
    let bv = model.bind_bottom_with(&mut get);
    let cv = model.bind_core_with(&mut get);
    let tv = model.bind_top_with(&mut get);

    let vision = model.graph_vision(g, &vv, &x.features)?;
    let hin = model.graph_bottom(g, &bv, &x.input_units)?;
    let ctc_logits = model.graph_ctc_logits(g, &bv, hin)?;
    let ctc = ctc_loss_node(g, ctc_logits, &x.transcript, model.vocab())?
        .ok_or_else(|| OmniError::Numeric("infeasible CTC target in gradcheck instance".into()))?;

    let mut ids = x.prompt.clone();
    ids.push(BOS);
    ids.extend(&x.target);
    ids.push(EOS);
    let emb = model.graph_text_embed(g, &cv, &ids)?;
    let ctx = g.concat_rows(&[vision, hin, emb])?;
    let h = model.graph_core(g, &cv, ctx)?;
    let before = g.shape(vision)[0] + g.shape(hin)[0] + x.prompt.len();
    let n = x.target.len();
    let pred = g.select_rows(h, &(before..=before + n).collect::<Vec<_>>())?;
    let logits = model.graph_text_logits(g, &cv, pred)?;
    let mut targets: Vec<Option<usize>> = x.target.iter().map(|&t| Some(t as usize)).collect();
    targets.push(Some(EOS as usize));
    let text_ce = g.cross_entropy(logits, &targets)?;

    let ht = g.select_rows(h, &(before + 1..=before + n + 1).collect::<Vec<_>>())?;
    let hu = model.graph_bottom(g, &bv, &x.target_units)?;
    let windows = x
        .counts
        .iter()
        .map(|&c| fusion_window(c, model.config().fusion_window, n + 1))
        .collect::<Result<Vec<_>>>()?;
    let ul = model.graph_top(g, &tv, Some(hu), ht, &windows)?;
    let mut ut: Vec<Option<usize>> = x
        .target_units
        .iter()
        .map(|&u| Some((u - model.config().text_size) as usize))
        .collect();
    ut.push(Some(model.config().unit_eos()));
    let unit_ce = g.cross_entropy(ul, &ut)?;
    g.weighted_sum(&[(text_ce, 1.0), (ctc, 0.5), (unit_ce, 1.0)])
}

pub struct FullModelCheck {
    pub config: ModelConfig,
    pub seed: u64,
}

impl FullModelCheck {
    /// Gradient check of instance `i` (fresh weights and inputs per instance).
    pub fn run(&self, i: u64, opts: &GradCheckOptions, fault: Option<OpKind>) -> Result<GroupedReport> {
        let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(i);
        let model = OmniModel::<f64>::new(self.config.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
        let x = instance(&self.config, &mut rng);
        let params: Vec<(String, Tensor<f64>)> =
            model.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
        let loss = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var> {
            let vars: HashMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
            model_loss(&model, g, &vars, &x)
        };
        let opts = GradCheckOptions {
            seed,
            ..opts.clone()
        };
        let report = check_gradients_with(&params, loss, &opts, |g| {
            if let Some(k) = fault {
                g.inject_fault(k)
            }
        })?;
        GroupedReport::new(report)
    }
}

/// Checks `instances` random tiny models; returns one report per instance.
pub fn full_model_gradcheck(
    config: &ModelConfig,
    seed: u64,
    instances: usize,
    opts: &GradCheckOptions,
) -> Result<Vec<GroupedReport>> {
    let check = FullModelCheck {
        config: config.clone(),
        seed,
    };
    (0..instances as u64).map(|i| check.run(i, opts, None)).collect()
}
