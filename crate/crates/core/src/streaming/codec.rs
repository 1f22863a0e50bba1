//! Synthetic speech tokenizer standing in for a neural speech codec.
//!
//! Every text id expands to a marker unit followed by a short tail drawn from
//! the remaining units. Tails form a prefix tree in which every inner node has
//! at least two children, so a token is identifiable only at the last unit of
//! its tail and the unit stream decodes back to text by splitting at markers.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{OmniError, Result};
use crate::vocab::{MultimodalVocab, TokenId, TokenKind};

/// Local unit index reserved as the token-start marker.
pub const MARKER: u32 = 0;
/// Longest tail; expansions are 2..=4 units with the marker.
pub const MAX_TAIL: usize = 3;

#[derive(Clone, Debug)]
pub struct SyntheticSpeechCodec {
    vocab: MultimodalVocab,
    seed: u64,
    expansions: Vec<Vec<TokenId>>,
    decode: HashMap<Vec<TokenId>, TokenId>,
}

impl SyntheticSpeechCodec {
    pub fn new(vocab: MultimodalVocab, seed: u64) -> Result<Self> {
        let alphabet = vocab.unit_size() as usize - 1;
        let n = vocab.text_size() as usize;
        if alphabet < 2 || alphabet.pow(MAX_TAIL as u32) < n {
            return Err(OmniError::Config(format!(
                "{} speech units cannot encode {n} text tokens",
                vocab.unit_size()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tokens: Vec<usize> = (0..n).collect();
        tokens.shuffle(&mut rng);
        let mut tails = vec![Vec::new(); n];
        build_tree(&tokens, Vec::new(), true, alphabet, &mut rng, &mut tails)?;

        let marker = vocab.unit_id(MARKER)?;
        let mut expansions = Vec::with_capacity(n);
        let mut decode = HashMap::with_capacity(n);
        for (t, tail) in tails.into_iter().enumerate() {
            let tail: Vec<TokenId> = tail.into_iter().map(|u| vocab.unit_id(u as u32 + 1)).collect::<Result<_>>()?;
            decode.insert(tail.clone(), t as TokenId);
            let mut e = vec![marker];
            e.extend(tail);
            expansions.push(e);
        }
        Ok(SyntheticSpeechCodec {
            vocab,
            seed,
            expansions,
            decode,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn vocab(&self) -> &MultimodalVocab {
        &self.vocab
    }

    pub fn expansion(&self, id: TokenId) -> Result<&[TokenId]> {
        self.vocab.expect(id, TokenKind::Text)?;
        Ok(&self.expansions[id as usize])
    }

    /// Concatenated unit expansions of a text sequence.
    pub fn tokenize(&self, text: &[TokenId]) -> Result<Vec<TokenId>> {
        let mut out = Vec::with_capacity(text.len() * (MAX_TAIL + 1));
        for &t in text {
            out.extend_from_slice(self.expansion(t)?);
        }
        Ok(out)
    }

    /// Reference decoder: split at markers and look each tail up.
    pub fn decode(&self, units: &[TokenId]) -> Result<Vec<TokenId>> {
        let marker = self.vocab.unit_id(MARKER)?;
        if units.is_empty() {
            return Ok(Vec::new());
        }
        if units[0] != marker {
            return Err(OmniError::Corpus("unit stream does not start with a marker".into()));
        }
        units[1..]
            .split(|&u| u == marker)
            .map(|tail| {
                self.decode
                    .get(tail)
                    .copied()
                    .ok_or_else(|| OmniError::Corpus(format!("unknown unit tail {tail:?}")))
            })
            .collect()
    }
}

/// Assigns tails (0-based non-marker unit indices) to `tokens` below `prefix`.
/// About a quarter of the tokens become root leaves; the rest are spread evenly
/// over as few inner nodes as fit, so every inner node branches widely and the
/// first units of a tail say little about which token it is.
fn build_tree(
    tokens: &[usize],
    prefix: Vec<usize>,
    root: bool,
    alphabet: usize,
    rng: &mut ChaCha8Rng,
    tails: &mut [Vec<usize>],
) -> Result<()> {
    if tokens.len() == 1 && !prefix.is_empty() {
        tails[tokens[0]] = prefix;
        return Ok(());
    }
    let (leaves, groups) = split(tokens.len(), MAX_TAIL - prefix.len(), root, alphabet).ok_or_else(|| {
        OmniError::Config(format!("{alphabet} tail units cannot lay out {} text tokens", tokens.len()))
    })?;
    let mut units: Vec<usize> = (0..alphabet).collect();
    units.shuffle(rng);
    let mut sizes = vec![1; leaves];
    let inner = tokens.len() - leaves;
    sizes.extend((0..groups).map(|g| inner / groups + usize::from(g < inner % groups)));
    let mut at = 0;
    for (&u, &size) in units.iter().zip(&sizes) {
        let mut p = prefix.clone();
        p.push(u);
        build_tree(&tokens[at..at + size], p, false, alphabet, rng, tails)?;
        at += size;
    }
    Ok(())
}

/// Leaf count and inner-node count for a node holding `k` tokens with
/// `depth_left` tail units still available.
fn split(k: usize, depth_left: usize, root: bool, alphabet: usize) -> Option<(usize, usize)> {
    if k <= alphabet && (!root || k < 4) {
        return Some((k, 0));
    }
    let cap = alphabet.pow(depth_left as u32 - 1);
    let want = if root { k / 4 } else { 0 };
    for limit in [alphabet.min(cap), cap] {
        for leaves in (0..=want).rev() {
            let m = k - leaves;
            let groups = m.div_ceil(limit);
            // inner nodes need two children each
            let fits = groups == 0 || m / groups >= 2;
            if fits && leaves + groups <= alphabet {
                return Some((leaves, groups));
            }
        }
    }
    None
}
