use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::model::ModelConfig;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Trainability group of a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Vision projection.
    Vision,
    /// Text rows of the shared embedding table.
    TextEmbedding,
    /// Core language-model layers, final norm and text head.
    Core,
    /// Unit and blank rows of the shared embedding table.
    SpeechEmbedding,
    /// Bottom speech layers, their norm and the CTC head.
    Bottom,
    /// Top speech layers, start vector, their norm and the unit head.
    Top,
}

#[derive(Clone, Debug)]
pub struct CrossAttnParams<T> {
    pub norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub cross: Option<CrossAttnParams<T>>,
    pub ffn_norm: Tensor<T>,
    pub w1: Tensor<T>,
    pub w2: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct VisionParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

/// All weights of the three-part stack plus the vision projection.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    /// Embedding rows for text ids `[text_size, d]`.
    pub embed_text: Tensor<T>,
    /// Embedding rows for unit ids followed by the blank `[unit_size + 1, d]`.
    pub embed_speech: Tensor<T>,
    pub vision: VisionParams<T>,
    pub bottom: Vec<LayerParams<T>>,
    pub bottom_norm: Tensor<T>,
    pub ctc_head: Tensor<T>,
    pub core: Vec<LayerParams<T>>,
    pub core_norm: Tensor<T>,
    pub text_head: Tensor<T>,
    pub top_start: Tensor<T>,
    pub top: Vec<LayerParams<T>>,
    pub top_norm: Tensor<T>,
    pub unit_head: Tensor<T>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(&mut self.rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches")
    }

    fn linear<T: Scalar>(&mut self, fan_in: usize, fan_out: usize, gain: f64) -> Tensor<T> {
        self.normal(&[fan_in, fan_out], gain / (fan_in as f64).sqrt())
    }

    fn layer<T: Scalar>(&mut self, c: &ModelConfig, cross: bool) -> LayerParams<T> {
        let d = c.d_model;
        let f = c.ffn_dim();
        let ones = || Tensor::filled(&[d], T::one());
        LayerParams {
            attn_norm: ones(),
            wq: self.linear(d, d, 1.0),
            wk: self.linear(d, d, 1.0),
            wv: self.linear(d, d, 1.0),
            wo: self.linear(d, d, 0.5),
            cross: cross.then(|| CrossAttnParams {
                norm: ones(),
                wq: self.linear(d, d, 1.0),
                wk: self.linear(d, d, 1.0),
                wv: self.linear(d, d, 1.0),
                wo: self.linear(d, d, 0.5),
            }),
            ffn_norm: ones(),
            w1: self.linear(d, f, 1.0),
            w2: self.linear(f, d, 0.5),
        }
    }
}

fn layer_entries<'a, T>(prefix: &str, layers: &'a [LayerParams<T>], out: &mut Vec<(String, &'a Tensor<T>)>) {
    for (i, l) in layers.iter().enumerate() {
        let p = |s: &str| format!("{prefix}.{i}.{s}");
        out.push((p("attn_norm"), &l.attn_norm));
        out.push((p("wq"), &l.wq));
        out.push((p("wk"), &l.wk));
        out.push((p("wv"), &l.wv));
        out.push((p("wo"), &l.wo));
        if let Some(c) = &l.cross {
            out.push((p("cross_norm"), &c.norm));
            out.push((p("cross_wq"), &c.wq));
            out.push((p("cross_wk"), &c.wk));
            out.push((p("cross_wv"), &c.wv));
            out.push((p("cross_wo"), &c.wo));
        }
        out.push((p("ffn_norm"), &l.ffn_norm));
        out.push((p("w1"), &l.w1));
        out.push((p("w2"), &l.w2));
    }
}

fn layer_entries_mut<'a, T>(prefix: &str, layers: &'a mut [LayerParams<T>], out: &mut Vec<(String, &'a mut Tensor<T>)>) {
    for (i, l) in layers.iter_mut().enumerate() {
        let p = |s: &str| format!("{prefix}.{i}.{s}");
        out.push((p("attn_norm"), &mut l.attn_norm));
        out.push((p("wq"), &mut l.wq));
        out.push((p("wk"), &mut l.wk));
        out.push((p("wv"), &mut l.wv));
        out.push((p("wo"), &mut l.wo));
        if let Some(c) = &mut l.cross {
            out.push((p("cross_norm"), &mut c.norm));
            out.push((p("cross_wq"), &mut c.wq));
            out.push((p("cross_wk"), &mut c.wk));
            out.push((p("cross_wv"), &mut c.wv));
            out.push((p("cross_wo"), &mut c.wo));
        }
        out.push((p("ffn_norm"), &mut l.ffn_norm));
        out.push((p("w1"), &mut l.w1));
        out.push((p("w2"), &mut l.w2));
    }
}

/// Group of a parameter by its name.
pub fn group_of(name: &str) -> Result<ParamGroup> {
    let head = name.split('.').next().unwrap_or("");
    Ok(match (head, name) {
        (_, "embed.text") => ParamGroup::TextEmbedding,
        (_, "embed.speech") => ParamGroup::SpeechEmbedding,
        ("vision", _) => ParamGroup::Vision,
        ("bottom", _) | (_, "ctc_head") => ParamGroup::Bottom,
        ("core", _) | (_, "text_head") => ParamGroup::Core,
        ("top", _) | (_, "unit_head") => ParamGroup::Top,
        _ => return Err(OmniError::Checkpoint(format!("unknown parameter name {name:?}"))),
    })
}

impl<T: Scalar> ModelParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = config;
        let d = c.d_model;
        let vocab = c.vocab()?;
        let ones = || Tensor::filled(&[d], T::one());
        Ok(ModelParams {
            embed_text: init.normal(&[c.text_size as usize, d], 1.0),
            embed_speech: init.normal(&[c.unit_size as usize + 1, d], 1.0),
            vision: VisionParams {
                w1: init.linear(c.vision_feature_dim, d, 1.0),
                b1: Tensor::zeros(&[d]),
                w2: init.linear(d, d, 1.0),
                b2: Tensor::zeros(&[d]),
            },
            bottom: (0..c.n_bottom_layers).map(|_| init.layer(c, false)).collect(),
            bottom_norm: ones(),
            ctc_head: init.linear(d, vocab.total() as usize, 1.0),
            core: (0..c.n_core_layers).map(|_| init.layer(c, false)).collect(),
            core_norm: ones(),
            text_head: init.linear(d, c.text_size as usize, 1.0),
            top_start: init.normal(&[1, d], 1.0),
            top: (0..c.n_top_layers)
                .map(|_| init.layer(c, c.fusion_type == crate::model::FusionType::Attention))
                .collect(),
            top_norm: ones(),
            unit_head: init.linear(d, c.unit_head_width(), 1.0),
        })
    }

    /// Every tensor with its canonical name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("embed.text".to_string(), &self.embed_text),
            ("embed.speech".to_string(), &self.embed_speech),
            ("vision.w1".to_string(), &self.vision.w1),
            ("vision.b1".to_string(), &self.vision.b1),
            ("vision.w2".to_string(), &self.vision.w2),
            ("vision.b2".to_string(), &self.vision.b2),
        ];
        layer_entries("bottom", &self.bottom, &mut out);
        out.push(("bottom.norm".into(), &self.bottom_norm));
        out.push(("ctc_head".into(), &self.ctc_head));
        layer_entries("core", &self.core, &mut out);
        out.push(("core.norm".into(), &self.core_norm));
        out.push(("text_head".into(), &self.text_head));
        out.push(("top.start".into(), &self.top_start));
        layer_entries("top", &self.top, &mut out);
        out.push(("top.norm".into(), &self.top_norm));
        out.push(("unit_head".into(), &self.unit_head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("embed.text".to_string(), &mut self.embed_text),
            ("embed.speech".to_string(), &mut self.embed_speech),
            ("vision.w1".to_string(), &mut self.vision.w1),
            ("vision.b1".to_string(), &mut self.vision.b1),
            ("vision.w2".to_string(), &mut self.vision.w2),
            ("vision.b2".to_string(), &mut self.vision.b2),
        ];
        layer_entries_mut("bottom", &mut self.bottom, &mut out);
        out.push(("bottom.norm".into(), &mut self.bottom_norm));
        out.push(("ctc_head".into(), &mut self.ctc_head));
        layer_entries_mut("core", &mut self.core, &mut out);
        out.push(("core.norm".into(), &mut self.core_norm));
        out.push(("text_head".into(), &mut self.text_head));
        out.push(("top.start".into(), &mut self.top_start));
        layer_entries_mut("top", &mut self.top, &mut out);
        out.push(("top.norm".into(), &mut self.top_norm));
        out.push(("unit_head".into(), &mut self.unit_head));
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Rows of the logical shared embedding table (`|V^omni|`).
    pub fn embedding_rows(&self) -> usize {
        self.embed_text.rows() + self.embed_speech.rows()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let layer = |l: &LayerParams<T>| LayerParams {
            attn_norm: l.attn_norm.cast(),
            wq: l.wq.cast(),
            wk: l.wk.cast(),
            wv: l.wv.cast(),
            wo: l.wo.cast(),
            cross: l.cross.as_ref().map(|c| CrossAttnParams {
                norm: c.norm.cast(),
                wq: c.wq.cast(),
                wk: c.wk.cast(),
                wv: c.wv.cast(),
                wo: c.wo.cast(),
            }),
            ffn_norm: l.ffn_norm.cast(),
            w1: l.w1.cast(),
            w2: l.w2.cast(),
        };
        ModelParams {
            embed_text: self.embed_text.cast(),
            embed_speech: self.embed_speech.cast(),
            vision: VisionParams {
                w1: self.vision.w1.cast(),
                b1: self.vision.b1.cast(),
                w2: self.vision.w2.cast(),
                b2: self.vision.b2.cast(),
            },
            bottom: self.bottom.iter().map(layer).collect(),
            bottom_norm: self.bottom_norm.cast(),
            ctc_head: self.ctc_head.cast(),
            core: self.core.iter().map(layer).collect(),
            core_norm: self.core_norm.cast(),
            text_head: self.text_head.cast(),
            top_start: self.top_start.cast(),
            top: self.top.iter().map(layer).collect(),
            top_norm: self.top_norm.cast(),
            unit_head: self.unit_head.cast(),
        }
    }

    /// Overwrites every tensor from `(name, tensor)` pairs; each name must
    /// appear exactly once with the expected shape.
    pub fn assign(&mut self, mut source: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut targets = self.named_mut();
        if source.len() != targets.len() {
            return Err(OmniError::Checkpoint(format!(
                "expected {} tensors, found {}",
                targets.len(),
                source.len()
            )));
        }
        source.sort_by(|a, b| a.0.cmp(&b.0));
        if source.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(OmniError::Checkpoint("duplicate tensor name".into()));
        }
        for (name, slot) in targets.iter_mut() {
            let i = source
                .binary_search_by(|(n, _)| n.as_str().cmp(name.as_str()))
                .map_err(|_| OmniError::Checkpoint(format!("missing tensor {name:?}")))?;
            let t = &source[i].1;
            if t.shape() != slot.shape() {
                return Err(OmniError::Checkpoint(format!(
                    "tensor {name:?} has shape {:?}, config expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            **slot = t.clone();
        }
        Ok(())
    }
}
