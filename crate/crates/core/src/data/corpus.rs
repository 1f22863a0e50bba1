//! Synthetic tri-modal corpus: ASR, echo, key-value recall and vision-label
//! tasks over a toy vocabulary, with speech produced by the synthetic codec.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{OmniError, Result};
use crate::numerics::Tensor;
use crate::streaming::SyntheticSpeechCodec;
use crate::vocab::{MultimodalVocab, TokenId, RESERVED_TEXT};

pub const CMD_ECHO: TokenId = RESERVED_TEXT;
pub const CMD_RECALL: TokenId = RESERVED_TEXT + 1;
pub const CMD_LOOK: TokenId = RESERVED_TEXT + 2;
/// First ordinary word id.
pub const FIRST_WORD: TokenId = RESERVED_TEXT + 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Task {
    Asr,
    T2T,
    S2T,
    S2S,
    VT2T,
    VS2T,
    VS2S,
}

impl Task {
    pub const ALL: [Task; 7] = [Task::Asr, Task::T2T, Task::S2T, Task::S2S, Task::VT2T, Task::VS2T, Task::VS2S];

    pub fn has_vision(self) -> bool {
        matches!(self, Task::VT2T | Task::VS2T | Task::VS2S)
    }

    pub fn speech_in(self) -> bool {
        matches!(self, Task::Asr | Task::S2T | Task::S2S | Task::VS2T | Task::VS2S)
    }

    pub fn text_in(self) -> bool {
        matches!(self, Task::T2T | Task::VT2T)
    }

    pub fn speech_out(self) -> bool {
        matches!(self, Task::S2S | Task::VS2S)
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Task::Asr => "ASR",
            Task::T2T => "T2T",
            Task::S2T => "S2T",
            Task::S2S => "S2S",
            Task::VT2T => "VT2T",
            Task::VS2T => "VS2T",
            Task::VS2S => "VS2S",
        };
        f.write_str(s)
    }
}

impl FromStr for Task {
    type Err = OmniError;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| OmniError::Config(format!("unknown task {s:?}")))
    }
}

/// Content family of a record; the task says how it is presented.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Asr,
    Echo,
    Recall,
    Vision,
}

impl Family {
    pub const ALL: [Family; 4] = [Family::Asr, Family::Echo, Family::Recall, Family::Vision];

    pub fn name(self) -> &'static str {
        match self {
            Family::Asr => "asr",
            Family::Echo => "echo",
            Family::Recall => "recall",
            Family::Vision => "vision",
        }
    }

    fn forms(self) -> &'static [Task] {
        match self {
            Family::Asr => &[Task::Asr],
            Family::Echo | Family::Recall => &[Task::T2T, Task::S2T, Task::S2S],
            Family::Vision => &[Task::VT2T, Task::VS2T, Task::VS2S],
        }
    }
}

/// Relative weights of the four families, parsed from `asr,echo,recall,vision`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMix(pub [f64; 4]);

impl Default for TaskMix {
    fn default() -> Self {
        TaskMix([1.0, 1.0, 1.0, 1.0])
    }
}

impl FromStr for TaskMix {
    type Err = OmniError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 4 {
            return Err(OmniError::Config(format!(
                "task mix needs 4 weights (asr,echo,recall,vision), got {}",
                parts.len()
            )));
        }
        let mut w = [0.0; 4];
        for (slot, p) in w.iter_mut().zip(&parts) {
            *slot = p
                .parse::<f64>()
                .map_err(|_| OmniError::Config(format!("bad task-mix weight {p:?}")))?;
        }
        let mix = TaskMix(w);
        mix.validate()?;
        Ok(mix)
    }
}

impl TaskMix {
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(OmniError::Config("task-mix weights must be finite and nonnegative".into()));
        }
        if self.0.iter().sum::<f64>() <= 0.0 {
            return Err(OmniError::Config("task mix sums to zero".into()));
        }
        Ok(())
    }
}

/// Fixed facts shared by every split: vocabulary, codec, the key-value table
/// and the vision class names.
#[derive(Clone, Debug)]
pub struct World {
    pub vocab: MultimodalVocab,
    pub codec: SyntheticSpeechCodec,
    /// (key word, three-word answer).
    pub knowledge: Vec<(TokenId, Vec<TokenId>)>,
    /// Three-word name per vision class; class `c` lights feature channel `c`.
    pub classes: Vec<Vec<TokenId>>,
    pub vision_tokens: usize,
    pub vision_dim: usize,
}

pub const N_KEYS: usize = 16;
pub const ANSWER_LEN: usize = 3;
pub const N_CLASSES: usize = 8;

impl World {
    pub fn new(vocab: MultimodalVocab, vision_tokens: usize, vision_dim: usize, seed: u64) -> Result<Self> {
        let words = vocab.text_size().saturating_sub(FIRST_WORD) as usize;
        if words < N_KEYS + 2 {
            return Err(OmniError::Config(format!(
                "text vocabulary of {} leaves {words} words, need at least {}",
                vocab.text_size(),
                N_KEYS + 2
            )));
        }
        if vision_dim < N_CLASSES || vision_tokens == 0 {
            return Err(OmniError::Config(format!(
                "vision features need at least {N_CLASSES} channels"
            )));
        }
        let codec = SyntheticSpeechCodec::new(vocab.clone(), seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b6e_6f77);
        let word = |rng: &mut ChaCha8Rng| FIRST_WORD + rng.random_range(0..words as u32);
        let keys = sample(&mut rng, words, N_KEYS);
        let knowledge = keys
            .iter()
            .map(|k| {
                let answer = (0..ANSWER_LEN).map(|_| word(&mut rng)).collect();
                (FIRST_WORD + k as u32, answer)
            })
            .collect();
        let classes = (0..N_CLASSES)
            .map(|_| (0..ANSWER_LEN).map(|_| word(&mut rng)).collect())
            .collect();
        Ok(World {
            vocab,
            codec,
            knowledge,
            classes,
            vision_tokens,
            vision_dim,
        })
    }

    fn n_words(&self) -> u32 {
        self.vocab.text_size() - FIRST_WORD
    }

    fn words(&self, rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<TokenId> {
        let n = rng.random_range(lo..=hi);
        (0..n).map(|_| FIRST_WORD + rng.random_range(0..self.n_words())).collect()
    }

    /// Feature block whose dominant channel is `class`.
    pub fn vision_features(&self, rng: &mut ChaCha8Rng, class: usize) -> Tensor<f32> {
        let mut data = Vec::with_capacity(self.vision_tokens * self.vision_dim);
        for _ in 0..self.vision_tokens {
            for c in 0..self.vision_dim {
                let noise: f32 = rng.random_range(-0.5..0.5);
                data.push(if c == class { 2.0 + noise } else { noise });
            }
        }
        Tensor::matrix(self.vision_tokens, self.vision_dim, data).expect("sized block")
    }

    pub fn record(&self, rng: &mut ChaCha8Rng, family: Family, task: Task, id: String) -> Result<CorpusRecord> {
        let mut vision = None;
        let (prompt, target) = match family {
            Family::Asr => (None, self.words(rng, 3, 8)),
            Family::Echo => {
                let w = self.words(rng, 3, 6);
                let mut p = vec![CMD_ECHO];
                p.extend(&w);
                (Some(p), w)
            }
            Family::Recall => {
                let (k, a) = &self.knowledge[rng.random_range(0..self.knowledge.len())];
                (Some(vec![CMD_RECALL, *k]), a.clone())
            }
            Family::Vision => {
                let class = rng.random_range(0..self.classes.len());
                vision = Some(encode_features(&self.vision_features(rng, class)));
                (Some(vec![CMD_LOOK]), self.classes[class].clone())
            }
        };
        let input_units = match (task.speech_in(), family) {
            (false, _) => None,
            (true, Family::Asr) => Some(self.codec.tokenize(&target)?),
            (true, _) => Some(self.codec.tokenize(prompt.as_deref().unwrap_or(&[]))?),
        };
        let target_units = if task.speech_out() { Some(self.codec.tokenize(&target)?) } else { None };
        Ok(CorpusRecord {
            id,
            task,
            family,
            vision_features: vision,
            input_text: if task.text_in() { prompt } else { None },
            input_units,
            target_text: target,
            target_units,
        })
    }

    /// Checks record-level invariants: fields present per task, ids in range,
    /// speech consistent with the codec.
    pub fn validate(&self, r: &CorpusRecord) -> Result<()> {
        let bad = |m: String| Err(OmniError::Corpus(format!("record {}: {m}", r.id)));
        let t = r.task;
        if r.vision_features.is_some() != t.has_vision() {
            return bad(format!("{t} vision field presence is wrong"));
        }
        if r.input_units.is_some() != t.speech_in() {
            return bad(format!("{t} input_units presence is wrong"));
        }
        if r.input_text.is_some() != t.text_in() {
            return bad(format!("{t} input_text presence is wrong"));
        }
        if r.target_units.is_some() != t.speech_out() {
            return bad(format!("{t} target_units presence is wrong"));
        }
        if !r.family.forms().contains(&t) {
            return bad(format!("family {:?} cannot take the {t} form", r.family));
        }
        if r.target_text.is_empty() {
            return bad("empty target text".into());
        }
        for &id in r.target_text.iter().chain(r.input_text.iter().flatten()) {
            if id < RESERVED_TEXT || id >= self.vocab.text_size() {
                return bad(format!("text id {id} outside the content range"));
            }
        }
        if let Some(u) = &r.input_units {
            if u.is_empty() {
                return bad("empty input speech".into());
            }
            let decoded = self.codec.decode(u);
            if t == Task::Asr && decoded.as_ref().ok() != Some(&r.target_text) {
                return bad("input units do not tokenize the transcription".into());
            }
            if decoded.is_err() {
                return bad("input units are not codec speech".into());
            }
        }
        if let Some(u) = &r.target_units {
            if *u != self.codec.tokenize(&r.target_text)? {
                return bad("target units do not tokenize the target text".into());
            }
        }
        if let Some(v) = &r.vision_features {
            let f = decode_features(v, self.vision_tokens, self.vision_dim)?;
            if f.data().iter().any(|x| !x.is_finite()) {
                return bad("non-finite vision feature".into());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: String,
    pub task: Task,
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision_features: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_text: Option<Vec<TokenId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_units: Option<Vec<TokenId>>,
    pub target_text: Vec<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_units: Option<Vec<TokenId>>,
}

impl CorpusRecord {
    pub fn features(&self, tokens: usize, dim: usize) -> Result<Option<Tensor<f32>>> {
        self.vision_features.as_deref().map(|s| decode_features(s, tokens, dim)).transpose()
    }
}

/// Base64 of the little-endian `f32` payload.
pub fn encode_features(t: &Tensor<f32>) -> String {
    let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    B64.encode(bytes)
}

pub fn decode_features(s: &str, tokens: usize, dim: usize) -> Result<Tensor<f32>> {
    let bytes = B64
        .decode(s)
        .map_err(|e| OmniError::Corpus(format!("bad vision features: {e}")))?;
    if bytes.len() != tokens * dim * 4 {
        return Err(OmniError::Corpus(format!(
            "vision block has {} bytes, expected {}",
            bytes.len(),
            tokens * dim * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::matrix(tokens, dim, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

/// Deterministic records of one split; splits draw from disjoint RNG streams.
pub fn gen_split(world: &World, seed: u64, split: Split, n: usize, mix: &TaskMix) -> Result<Vec<CorpusRecord>> {
    mix.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    let families = WeightedIndex::new(mix.0).map_err(|e| OmniError::Config(e.to_string()))?;
    (0..n)
        .map(|i| {
            let family = Family::ALL[families.sample(&mut rng)];
            let forms = family.forms();
            let task = forms[rng.random_range(0..forms.len())];
            world.record(&mut rng, family, task, format!("{}-{i:06}", split.name()))
        })
        .collect()
}

pub fn write_jsonl(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<CorpusRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line)
            .map_err(|e| OmniError::Corpus(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Describes a generated corpus directory so loaders can rebuild its world.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub text_size: u32,
    pub unit_size: u32,
    pub vision_tokens: usize,
    pub vision_dim: usize,
    pub task_mix: TaskMix,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
}

pub const MANIFEST: &str = "corpus.json";

impl CorpusManifest {
    pub fn world(&self) -> Result<World> {
        World::new(
            MultimodalVocab::new(self.text_size, self.unit_size)?,
            self.vision_tokens,
            self.vision_dim,
            self.seed,
        )
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Dev => self.n_dev,
            Split::Test => self.n_test,
        }
    }
}

/// Generates all splits into `dir` (manifest plus `<split>.jsonl`).
pub fn gen_corpus(dir: &Path, manifest: &CorpusManifest) -> Result<()> {
    let world = manifest.world()?;
    std::fs::create_dir_all(dir)?;
    for split in Split::ALL {
        let records = gen_split(&world, manifest.seed, split, manifest.count(split), &manifest.task_mix)?;
        for r in &records {
            world.validate(r)?;
        }
        write_jsonl(&dir.join(format!("{}.jsonl", split.name())), &records)?;
    }
    let mut f = File::create(dir.join(MANIFEST))?;
    serde_json::to_writer_pretty(&mut f, manifest)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub struct Corpus {
    pub manifest: CorpusManifest,
    pub world: World,
    pub train: Vec<CorpusRecord>,
    pub dev: Vec<CorpusRecord>,
    pub test: Vec<CorpusRecord>,
}

impl Corpus {
    /// Loads a generated directory; missing split files load as empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: CorpusManifest = serde_json::from_reader(BufReader::new(
            File::open(dir.join(MANIFEST)).map_err(|e| OmniError::Corpus(format!("{}: {e}", dir.join(MANIFEST).display())))?,
        ))?;
        let world = manifest.world()?;
        let load = |s: Split| {
            let p = dir.join(format!("{}.jsonl", s.name()));
            if p.exists() {
                read_jsonl(&p)
            } else {
                Ok(Vec::new())
            }
        };
        Ok(Corpus {
            train: load(Split::Train)?,
            dev: load(Split::Dev)?,
            test: load(Split::Test)?,
            manifest,
            world,
        })
    }

    pub fn split(&self, s: Split) -> &[CorpusRecord] {
        match s {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Validates every record; returns the count checked.
    pub fn validate(&self) -> Result<usize> {
        let mut n = 0;
        for s in Split::ALL {
            for r in self.split(s) {
                self.world.validate(r)?;
                n += 1;
            }
        }
        Ok(n)
    }
}
