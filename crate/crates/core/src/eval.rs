//! Evaluation: word error rate over CTC transcripts, exact match of generated
//! answers, and consistency between generated text and generated speech.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctc::greedy_decode;
use crate::data::{CorpusRecord, Task, World};
use crate::error::{OmniError, Result};
use crate::model::OmniModel;
use crate::scalar::Scalar;
use crate::streaming::{modality_route, Inputs, ModelBackend, Output, Session, SessionConfig, SessionInput};
use crate::vocab::TokenId;

/// Levenshtein distance (unit-cost substitutions, deletions, insertions).
pub fn edit_distance<A: PartialEq>(a: &[A], b: &[A]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `(S + D + I) / N` for one hypothesis against a non-empty reference.
pub fn wer(hyp: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(OmniError::Corpus("WER needs a non-empty reference".into()));
    }
    Ok(edit_distance(hyp, reference) as f64 / reference.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "WER")]
    Wer,
    #[serde(rename = "exact_match")]
    ExactMatch,
    #[serde(rename = "unit_consistency")]
    UnitConsistency,
    #[serde(rename = "unit_accuracy")]
    UnitAccuracy,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Wer => "WER",
            Metric::ExactMatch => "exact_match",
            Metric::UnitConsistency => "unit_consistency",
            Metric::UnitAccuracy => "unit_accuracy",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: String,
    pub metric: Metric,
    pub value: f64,
    pub samples: usize,
}

fn nonempty(task: &str, n: usize) -> Result<()> {
    if n == 0 {
        Err(OmniError::Corpus(format!("no evaluation records for {task}")))
    } else {
        Ok(())
    }
}

/// Greedy CTC transcript of input speech through the bottom stack.
pub fn transcribe<T: Scalar>(model: &OmniModel<T>, units: &[TokenId]) -> Result<Vec<TokenId>> {
    let mut cache = model.new_cache();
    let h = model.bottom_forward(units, &mut cache.bottom_input)?;
    let align = greedy_decode(&model.ctc_logits(&h)?, model.vocab())?;
    Ok(align.text().to_vec())
}

/// Corpus-level WER: total edits over total reference length.
pub fn eval_asr<T: Scalar>(model: &OmniModel<T>, records: &[&CorpusRecord]) -> Result<EvalResult> {
    nonempty("ASR", records.len())?;
    let per: Vec<(usize, usize)> = records
        .par_iter()
        .map(|r| {
            let units = r.input_units.as_deref().unwrap_or(&[]);
            let hyp = transcribe(model, units)?;
            Ok((edit_distance(&hyp, &r.target_text), r.target_text.len()))
        })
        .collect::<Result<_>>()?;
    let edits: usize = per.iter().map(|p| p.0).sum();
    let words: usize = per.iter().map(|p| p.1).sum();
    Ok(EvalResult {
        task: "ASR".into(),
        metric: Metric::Wer,
        value: edits as f64 / words.max(1) as f64,
        samples: records.len(),
    })
}

/// Session over a record's inputs, routed by its task.
pub fn record_session<T: Scalar>(
    model: &Arc<OmniModel<T>>,
    world: &World,
    r: &CorpusRecord,
    speech_out: bool,
    config: SessionConfig,
) -> Result<Session<ModelBackend<T>>> {
    let t = r.task;
    let inputs = Inputs {
        vision: t.has_vision(),
        speech: t.speech_in(),
        text: t.text_in(),
    };
    let route = modality_route(inputs, if speech_out { Output::Speech } else { Output::Text })?;
    let input = SessionInput {
        vision: r.features(world.vision_tokens, world.vision_dim)?,
        units: r.input_units.clone().unwrap_or_default(),
        text: r.input_text.clone().unwrap_or_default(),
    };
    Session::new(ModelBackend::new(model.clone()), route, input, config)
}

/// Outcome of one record run through a session.
#[derive(Clone, Debug)]
pub struct SessionOutcome {
    pub text: Vec<TokenId>,
    pub units: Vec<TokenId>,
    pub speech_text: Vec<TokenId>,
    pub forced: usize,
}

pub fn run_record<T: Scalar>(
    model: &Arc<OmniModel<T>>,
    world: &World,
    r: &CorpusRecord,
    speech_out: bool,
    config: SessionConfig,
) -> Result<SessionOutcome> {
    let mut s = record_session(model, world, r, speech_out, config)?;
    s.collect_events()?;
    Ok(SessionOutcome {
        text: s.text().to_vec(),
        units: s.units().to_vec(),
        speech_text: s.speech_text().to_vec(),
        forced: s.forced_advances(),
    })
}

/// Fraction of records whose generated text equals the target exactly.
pub fn eval_exact_match<T: Scalar>(
    model: &Arc<OmniModel<T>>,
    world: &World,
    records: &[&CorpusRecord],
    label: &str,
    config: &SessionConfig,
) -> Result<EvalResult> {
    nonempty(label, records.len())?;
    let hits: Vec<bool> = records
        .par_iter()
        .map(|r| Ok(run_record(model, world, r, false, config.clone())?.text == r.target_text))
        .collect::<Result<_>>()?;
    Ok(EvalResult {
        task: label.into(),
        metric: Metric::ExactMatch,
        value: hits.iter().filter(|&&h| h).count() as f64 / records.len() as f64,
        samples: records.len(),
    })
}

/// Fraction of speech-output sessions where the CTC collapse of the generated
/// units equals the generated text (and the text is non-empty).
pub fn eval_unit_consistency<T: Scalar>(
    model: &Arc<OmniModel<T>>,
    world: &World,
    records: &[&CorpusRecord],
    label: &str,
    config: &SessionConfig,
) -> Result<EvalResult> {
    nonempty(label, records.len())?;
    let hits: Vec<bool> = records
        .par_iter()
        .map(|r| {
            let o = run_record(model, world, r, true, config.clone())?;
            Ok(!o.text.is_empty() && o.speech_text == o.text)
        })
        .collect::<Result<_>>()?;
    Ok(EvalResult {
        task: label.into(),
        metric: Metric::UnitConsistency,
        value: hits.iter().filter(|&&h| h).count() as f64 / records.len() as f64,
        samples: records.len(),
    })
}

/// Records of the given tasks, at most `limit` of them.
pub fn select<'a>(records: &'a [CorpusRecord], tasks: &[Task], limit: usize) -> Vec<&'a CorpusRecord> {
    records.iter().filter(|r| tasks.contains(&r.task)).take(limit).collect()
}

/// What `eval_suite` measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// WER of the bottom-stack transcript on ASR records.
    Asr,
    /// Exact match on records of one task (plus unit consistency for speech output).
    Task(Task),
    /// Exact match on key-value recall asked by speech.
    RecallSpeech,
    /// Unit consistency over every speech-output record.
    Consistency,
    All,
}

impl std::str::FromStr for Suite {
    type Err = OmniError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "asr" => Ok(Suite::Asr),
            "recall" | "recall-speech" | "recall_speech" => Ok(Suite::RecallSpeech),
            "consistency" | "unit_consistency" | "unit-consistency" => Ok(Suite::Consistency),
            "all" => Ok(Suite::All),
            other => other.parse().map(Suite::Task).map_err(|_| {
                OmniError::Config(format!(
                    "unknown eval task {s:?} (asr, recall, consistency, all, or a task such as S2T)"
                ))
            }),
        }
    }
}

/// Runs a metric suite over `records` (at most `limit` per metric).
pub fn eval_suite<T: Scalar>(
    model: &Arc<OmniModel<T>>,
    world: &World,
    records: &[CorpusRecord],
    suite: Suite,
    limit: usize,
    config: &SessionConfig,
) -> Result<Vec<EvalResult>> {
    let speech_recall = |r: &&CorpusRecord| r.family == crate::data::Family::Recall && r.task == Task::S2T;
    let mut out = Vec::new();
    match suite {
        Suite::Asr => out.push(eval_asr(model, &select(records, &[Task::Asr], limit))?),
        Suite::Task(Task::Asr) => return eval_suite(model, world, records, Suite::Asr, limit, config),
        Suite::Task(t) => {
            let recs = select(records, &[t], limit);
            out.push(eval_exact_match(model, world, &recs, &t.to_string(), config)?);
            if t.speech_out() {
                out.push(eval_unit_consistency(model, world, &recs, &t.to_string(), config)?);
            }
        }
        Suite::RecallSpeech => {
            let recs: Vec<&CorpusRecord> = records.iter().filter(speech_recall).take(limit).collect();
            out.push(eval_exact_match(model, world, &recs, "recall_speech_in", config)?);
        }
        Suite::Consistency => {
            let recs: Vec<&CorpusRecord> = records.iter().filter(|r| r.task.speech_out()).take(limit).collect();
            out.push(eval_unit_consistency(model, world, &recs, "speech_out", config)?);
        }
        Suite::All => {
            // metrics without records in this split are left out
            let present = [
                records.iter().any(|r| r.task == Task::Asr),
                records.iter().any(|r| speech_recall(&r)),
                records.iter().any(|r| r.task.speech_out()),
            ];
            for (s, _) in [Suite::Asr, Suite::RecallSpeech, Suite::Consistency].into_iter().zip(present).filter(|p| p.1) {
                out.extend(eval_suite(model, world, records, s, limit, config)?);
            }
            for t in Task::ALL.into_iter().filter(|&t| t != Task::Asr) {
                if records.iter().any(|r| r.task == t) {
                    let recs = select(records, &[t], limit);
                    out.push(eval_exact_match(model, world, &recs, &t.to_string(), config)?);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    /// Full-matrix dynamic program, written independently of the two-row version.
    fn dp_oracle(a: &[u32], b: &[u32]) -> usize {
        let mut d = vec![vec![0usize; b.len() + 1]; a.len() + 1];
        for (i, row) in d.iter_mut().enumerate() {
            row[0] = i;
        }
        for j in 0..=b.len() {
            d[0][j] = j;
        }
        for i in 1..=a.len() {
            for j in 1..=b.len() {
                let c = if a[i - 1] == b[j - 1] { 0 } else { 1 };
                d[i][j] = (d[i - 1][j - 1] + c).min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
            }
        }
        d[a.len()][b.len()]
    }

    #[test]
    fn wer_definition_cases() {
        let r: Vec<u32> = (10..20).collect();
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        let mut h = r.clone();
        h[4] = 99;
        assert!((wer(&h, &r).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(wer(&[], &r).unwrap(), 1.0);
        assert!(wer(&[1], &[]).is_err());
        assert_eq!(edit_distance(&[1, 2, 3], &[2, 3, 4]), 2);
    }

    #[test]
    fn edit_distance_matches_dp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let a: Vec<u32> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<u32> = (0..rng.random_range(0..12)).map(|_| rng.random_range(0..4)).collect();
            assert_eq!(edit_distance(&a, &b), dp_oracle(&a, &b));
        }
    }

    #[test]
    fn suite_names_parse() {
        assert_eq!("asr".parse::<Suite>().unwrap(), Suite::Asr);
        assert_eq!("s2t".parse::<Suite>().unwrap(), Suite::Task(Task::S2T));
        assert_eq!("recall".parse::<Suite>().unwrap(), Suite::RecallSpeech);
        assert!("nope".parse::<Suite>().is_err());
    }

    #[test]
    fn empty_sets_are_errors() {
        let m = OmniModel::<f64>::new(crate::model::ModelConfig::tiny(), 0).unwrap();
        assert!(eval_asr(&m, &[]).is_err());
    }
}
