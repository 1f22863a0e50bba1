//! Connectionist temporal classification: loss, greedy decoding, incremental
//! alignment counts and blank removal.
//!
//! Collapse merges adjacent repeats and then deletes blanks; a blank between two
//! equal labels keeps both.

use crate::error::{OmniError, Result};
use crate::numerics::kernels::{self, log_sum_exp};
use crate::numerics::{Graph, Tensor, Var};
use crate::scalar::Scalar;
use crate::vocab::{MultimodalVocab, TokenId, TokenKind};

/// A frame-level CTC label sequence; ids are text tokens or the blank.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CtcPath {
    ids: Vec<TokenId>,
}

impl CtcPath {
    pub fn new(ids: Vec<TokenId>, vocab: &MultimodalVocab) -> Result<Self> {
        for &id in &ids {
            if vocab.classify(id)? == TokenKind::Unit {
                return Err(OmniError::TokenKind {
                    id,
                    expected: "text token or blank",
                    found: TokenKind::Unit.name(),
                });
            }
        }
        Ok(CtcPath { ids })
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Standard CTC collapse of a frame sequence.
pub fn collapse(path: &[TokenId], blank: TokenId) -> Vec<TokenId> {
    let mut out = Vec::new();
    let mut prev: Option<TokenId> = None;
    for &id in path {
        if id != blank && prev != Some(id) {
            out.push(id);
        }
        prev = Some(id);
    }
    out
}

/// Greedy CTC path with running collapsed-length counts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CtcAlignment {
    blank: TokenId,
    path: Vec<TokenId>,
    prefix_counts: Vec<usize>,
    /// Previous frame's id when it was non-blank; a blank clears it.
    last_emit: Option<TokenId>,
    text: Vec<TokenId>,
}

impl CtcAlignment {
    pub fn new(blank: TokenId) -> Self {
        CtcAlignment {
            blank,
            path: Vec::new(),
            prefix_counts: Vec::new(),
            last_emit: None,
            text: Vec::new(),
        }
    }

    /// Appends one frame label. Returns true when it completes a new collapsed symbol.
    pub fn push(&mut self, id: TokenId) -> bool {
        let emitted = id != self.blank && self.last_emit != Some(id);
        if emitted {
            self.text.push(id);
        }
        self.last_emit = if id == self.blank { None } else { Some(id) };
        self.path.push(id);
        self.prefix_counts.push(self.text.len());
        emitted
    }

    pub fn from_path(path: &[TokenId], blank: TokenId) -> Self {
        let mut a = Self::new(blank);
        for &id in path {
            a.push(id);
        }
        a
    }

    pub fn blank(&self) -> TokenId {
        self.blank
    }

    pub fn path(&self) -> &[TokenId] {
        &self.path
    }

    /// `N_i` for i = 1..=len: collapsed length of the first i frames.
    pub fn prefix_counts(&self) -> &[usize] {
        &self.prefix_counts
    }

    /// Collapsed length of the first `frames` frames (0 for the empty prefix).
    pub fn count_at(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            self.prefix_counts[frames - 1]
        }
    }

    pub fn count(&self) -> usize {
        self.text.len()
    }

    pub fn last_emit(&self) -> Option<TokenId> {
        self.last_emit
    }

    /// Collapsed text recognized so far.
    pub fn text(&self) -> &[TokenId] {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.path.len()
    }

    pub fn is_empty(&self) -> bool {
        self.path.is_empty()
    }
}

/// Argmax of one CTC frame restricted to text ids and the blank; ties go to the
/// lowest id.
pub fn frame_argmax<T: Scalar>(frame: &[T], vocab: &MultimodalVocab) -> TokenId {
    let text = vocab.text_size() as usize;
    let blank = vocab.blank_id() as usize;
    let best_text = kernels::argmax(&frame[..text]);
    if frame[blank] > frame[best_text] {
        blank as TokenId
    } else {
        best_text as TokenId
    }
}

/// Greedy decode of CTC logits `[frames, |V^omni|]`.
pub fn greedy_decode<T: Scalar>(logits: &Tensor<T>, vocab: &MultimodalVocab) -> Result<CtcAlignment> {
    check_width(logits, vocab)?;
    let mut a = CtcAlignment::new(vocab.blank_id());
    for t in 0..logits.rows() {
        a.push(frame_argmax(logits.row(t), vocab));
    }
    Ok(a)
}

/// Streams one more frame into an existing alignment.
pub fn extend_alignment<T: Scalar>(align: &mut CtcAlignment, frame: &[T], vocab: &MultimodalVocab) -> bool {
    align.push(frame_argmax(frame, vocab))
}

fn check_width<T: Scalar>(logits: &Tensor<T>, vocab: &MultimodalVocab) -> Result<()> {
    let frames = if logits.is_empty() { 0 } else { logits.rows() };
    if logits.shape().len() != 2 || logits.cols() != vocab.total() as usize {
        return Err(OmniError::dim("ctc logits", logits.shape(), &[frames, vocab.total() as usize]));
    }
    Ok(())
}

/// Rows of `h` whose path label is not blank, order preserved.
pub fn kept_rows(align: &CtcAlignment) -> Vec<usize> {
    align
        .path()
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != align.blank())
        .map(|(i, _)| i)
        .collect()
}

/// Drops the rows of `h` aligned to blank frames.
pub fn remove_blanks<T: Scalar>(h: &Tensor<T>, align: &CtcAlignment) -> Result<Tensor<T>> {
    let rows = if h.is_empty() && h.shape().first() == Some(&0) { 0 } else { h.rows() };
    if rows != align.len() {
        return Err(OmniError::dim("remove_blanks", h.shape(), &[align.len()]));
    }
    let d = h.cols();
    let keep = kept_rows(align);
    let mut data = Vec::with_capacity(keep.len() * d);
    for r in &keep {
        data.extend_from_slice(h.row(*r));
    }
    Tensor::matrix(keep.len(), d, data)
}

/// Minimum number of frames able to emit `target`.
pub fn min_frames(target: &[TokenId]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of the CTC forward-backward pass.
#[derive(Clone, Debug)]
pub struct CtcLoss<T> {
    /// Negative log-likelihood; `+inf` when the target is infeasible.
    pub loss: T,
    pub feasible: bool,
    /// Gradient of the loss with respect to the raw logits, when feasible.
    pub grad: Option<Vec<T>>,
}

/// Negative log-likelihood of `target` under frame logits `[frames, width]`
/// (softmax applied per frame), summed over every path collapsing to it.
pub fn ctc_loss<T: Scalar>(logits: &[T], width: usize, target: &[TokenId], blank: TokenId) -> Result<CtcLoss<T>> {
    if width == 0 || logits.len() % width != 0 {
        return Err(OmniError::dim("ctc_loss", &[logits.len()], &[width]));
    }
    let frames = logits.len() / width;
    let blank = blank as usize;
    if blank >= width || target.iter().any(|&t| t as usize >= width || t as usize == blank) {
        return Err(OmniError::Config("ctc target contains blank or out-of-range ids".into()));
    }
    if frames < min_frames(target) {
        return Ok(CtcLoss {
            loss: T::infinity(),
            feasible: false,
            grad: None,
        });
    }
    if frames == 0 {
        return Ok(CtcLoss {
            loss: T::zero(),
            feasible: true,
            grad: Some(Vec::new()),
        });
    }

    let mut lp = logits.to_vec();
    for row in lp.chunks_mut(width) {
        kernels::log_softmax_in_place(row);
    }
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t as usize);
        ext.push(blank);
    }
    let s_len = ext.len();
    let ninf = T::neg_infinity();
    let skip = |s: usize| s >= 2 && ext[s] != blank && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_sum_exp(a, prev[s - 1]);
            }
            if skip(s) {
                a = log_sum_exp(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * width + ext[s]] };
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = log_sum_exp(log_p, alpha[last + s_len - 2]);
    }
    if log_p == ninf {
        return Ok(CtcLoss {
            loss: T::infinity(),
            feasible: false,
            grad: None,
        });
    }

    // beta excludes the emission at its own frame
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = T::zero();
    if s_len > 1 {
        beta[last + s_len - 2] = T::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let emit = |s2: usize| beta[next + s2] + lp[(t + 1) * width + ext[s2]];
            let mut b = emit(s);
            if s + 1 < s_len {
                b = log_sum_exp(b, emit(s + 1));
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_sum_exp(b, emit(s + 2));
            }
            beta[t * s_len + s] = b;
        }
    }

    let mut grad = vec![T::zero(); frames * width];
    for t in 0..frames {
        let g = &mut grad[t * width..(t + 1) * width];
        for (k, gk) in g.iter_mut().enumerate() {
            *gk = lp[t * width + k].exp();
        }
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab != ninf {
                g[ext[s]] = g[ext[s]] - (ab - log_p).exp();
            }
        }
    }
    Ok(CtcLoss {
        loss: -log_p,
        feasible: true,
        grad: Some(grad),
    })
}

/// Records the CTC loss of `logits: [frames, |V^omni|]` on the graph. Returns
/// `None` for infeasible targets, which carry no gradient.
pub fn ctc_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    target: &[TokenId],
    vocab: &MultimodalVocab,
) -> Result<Option<Var>> {
    let width = vocab.total() as usize;
    if g.value(logits).cols() != width {
        return Err(OmniError::dim("ctc logits", g.shape(logits), &[width]));
    }
    let res = ctc_loss(g.value(logits).data(), width, target, vocab.blank_id())?;
    match (res.feasible, res.grad) {
        (true, Some(grad)) => Ok(Some(g.custom_scalar(logits, res.loss, grad)?)),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: TokenId = 0;
    const B: TokenId = 1;
    const BL: TokenId = 2;

    #[test]
    fn collapse_rules() {
        assert!(collapse(&[BL, BL, BL], BL).is_empty());
        assert_eq!(collapse(&[A, A, BL, B], BL), vec![A, B]);
        assert_eq!(collapse(&[A, BL, A], BL), vec![A, A]);
    }

    #[test]
    fn counts_for_known_path() {
        let a = CtcAlignment::from_path(&[BL, A, A, BL, B], BL);
        assert_eq!(a.prefix_counts(), &[0, 1, 1, 1, 2]);
    }

    #[test]
    fn repeat_and_blank_rules() {
        let mut a = CtcAlignment::from_path(&[A], BL);
        assert!(!a.push(A));
        assert_eq!(a.count(), 1);
        assert!(!a.push(BL));
        assert_eq!(a.count(), 1);
        assert_eq!(a.last_emit(), None);
        assert!(a.push(A));
        assert_eq!(a.count(), 2);
    }

    #[test]
    fn single_frame_uniform() {
        let r = ctc_loss(&[0.0f64; 3], 3, &[A], BL).unwrap();
        assert!((r.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn certain_blank_has_zero_loss() {
        let logits = [-1e9, -1e9, 0.0, -1e9, -1e9, 0.0f64];
        let r = ctc_loss(&logits, 3, &[], BL).unwrap();
        assert!(r.loss.abs() < 1e-9);
    }

    #[test]
    fn infeasible_target_is_flagged() {
        let r = ctc_loss(&[0.0f64; 3], 3, &[A, A], BL).unwrap();
        assert!(!r.feasible);
        assert!(r.loss.is_infinite());
        assert!(r.grad.is_none());
        assert_eq!(min_frames(&[A, A, B]), 4);
    }

    #[test]
    fn remove_blank_rows() {
        let h = Tensor::matrix(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0f64]).unwrap();
        let a = CtcAlignment::from_path(&[A, BL, B], BL);
        let r = remove_blanks(&h, &a).unwrap();
        assert_eq!(r.data(), &[1.0, 1.0, 3.0, 3.0]);
        let all_blank = CtcAlignment::from_path(&[BL, BL, BL], BL);
        assert_eq!(remove_blanks(&h, &all_blank).unwrap().rows(), 0);
        assert!(remove_blanks(&h, &CtcAlignment::from_path(&[A], BL)).is_err());
    }

    #[test]
    fn argmax_ignores_unit_ids() {
        let v = MultimodalVocab::new(4, 2).unwrap();
        // text 0..4, units 4..6, blank 6
        let frame = [0.0, 0.1, 0.0, 0.0, 5.0, 5.0, 0.05f64];
        assert_eq!(frame_argmax(&frame, &v), 1);
        let tie = [0.3, 0.3, 0.0, 0.0, 0.0, 0.0, 0.3f64];
        assert_eq!(frame_argmax(&tie, &v), 0);
    }

    #[test]
    fn path_rejects_units() {
        let v = MultimodalVocab::new(4, 2).unwrap();
        assert!(CtcPath::new(vec![0, 6], &v).is_ok());
        assert!(CtcPath::new(vec![0, 4], &v).is_err());
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Sum of path probabilities over every length-`frames` path collapsing to
    /// `target`, by exhaustive enumeration.
    fn enumerate_loss(logits: &[f64], width: usize, target: &[TokenId], blank: TokenId) -> f64 {
        let frames = logits.len() / width;
        let probs: Vec<Vec<f64>> = logits
            .chunks(width)
            .map(|r| {
                let z: f64 = r.iter().map(|v| v.exp()).sum();
                r.iter().map(|v| v.exp() / z).collect()
            })
            .collect();
        let mut total = 0.0;
        let mut path = vec![0 as TokenId; frames];
        let count = width.pow(frames as u32);
        for code in 0..count {
            let mut c = code;
            let mut p = 1.0;
            for t in 0..frames {
                path[t] = (c % width) as TokenId;
                c /= width;
                p *= probs[t][path[t] as usize];
            }
            if collapse(&path, blank) == target {
                total += p;
            }
        }
        -total.ln()
    }

    fn all_targets(max_len: usize, symbols: &[TokenId]) -> Vec<Vec<TokenId>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for t in &frontier {
                for &s in symbols {
                    let mut u: Vec<TokenId> = t.clone();
                    u.push(s);
                    next.push(u);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    fn random_logits(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn four_frames_two_labels_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = random_logits(&mut rng, 12, 2.0);
        let r = ctc_loss(&logits, 3, &[A, B], BL).unwrap();
        let oracle = enumerate_loss(&logits, 3, &[A, B], BL);
        assert!((r.loss - oracle).abs() < 1e-6, "{} vs {oracle}", r.loss);
    }

    #[test]
    fn loss_matches_enumeration_small_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for frames in 1..=4 {
            let logits = random_logits(&mut rng, frames * 3, 2.0);
            for target in all_targets(3, &[A, B]) {
                let r = ctc_loss(&logits, 3, &target, BL).unwrap();
                let oracle = enumerate_loss(&logits, 3, &target, BL);
                if oracle.is_infinite() {
                    assert!(!r.feasible);
                } else {
                    assert!((r.loss - oracle).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 5 * 4, 1.5);
            let target = [0, 1, 1];
            let r = ctc_loss(&logits, 4, &target, 3).unwrap();
            let grad = r.grad.unwrap();
            let h = 1e-4;
            for i in 0..logits.len() {
                let mut p = logits.clone();
                p[i] += h;
                let lp = ctc_loss(&p, 4, &target, 3).unwrap().loss;
                p[i] -= 2.0 * h;
                let lm = ctc_loss(&p, 4, &target, 3).unwrap().loss;
                let num = (lp - lm) / (2.0 * h);
                let err = crate::numerics::gradcheck::relative_error(grad[i], num, 1e-8);
                assert!(err < 1e-3, "element {i}: {} vs {num}", grad[i]);
            }
        }
    }

    #[test]
    fn greedy_counts_match_recollapse() {
        let v = MultimodalVocab::new(4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let frames = rng.random_range(0..12);
            let data = random_logits(&mut rng, frames * 7, 2.0);
            let t = Tensor::matrix(frames, 7, data).unwrap();
            let a = greedy_decode(&t, &v).unwrap();
            for i in 1..=frames {
                assert_eq!(a.prefix_counts()[i - 1], collapse(&a.path()[..i], v.blank_id()).len());
            }
            let mut inc = CtcAlignment::new(v.blank_id());
            for f in 0..frames {
                extend_alignment(&mut inc, t.row(f), &v);
            }
            assert_eq!(inc, a);
        }
    }

    #[test]
    fn all_blank_logits_decode_to_nothing() {
        let v = MultimodalVocab::new(4, 2).unwrap();
        let mut data = vec![0.0f64; 3 * 7];
        for f in 0..3 {
            data[f * 7 + 6] = 5.0;
        }
        let a = greedy_decode(&Tensor::matrix(3, 7, data).unwrap(), &v).unwrap();
        assert_eq!(a.prefix_counts(), &[0, 0, 0]);
        assert!(a.text().is_empty());
    }
}

