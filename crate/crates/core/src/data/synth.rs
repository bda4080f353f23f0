use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParallelExample;
use crate::{Error, Result};

/// Word-order transformation applied to the pivot sentence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ReorderRule {
    Identity,
    Reverse,
    SwapAdjacent,
    /// Rotate left by `k` positions.
    Rotate(usize),
}

impl ReorderRule {
    pub fn apply<T: Clone>(self, xs: &[T]) -> Vec<T> {
        let n = xs.len();
        match self {
            ReorderRule::Identity => xs.to_vec(),
            ReorderRule::Reverse => xs.iter().rev().cloned().collect(),
            ReorderRule::SwapAdjacent => {
                let mut out = xs.to_vec();
                for pair in out.chunks_mut(2) {
                    pair.reverse();
                }
                out
            }
            ReorderRule::Rotate(k) if n > 0 => (0..n).map(|i| xs[(i + k) % n].clone()).collect(),
            ReorderRule::Rotate(_) => Vec::new(),
        }
    }

    pub fn invert<T: Clone>(self, xs: &[T]) -> Vec<T> {
        let n = xs.len();
        match self {
            ReorderRule::Rotate(k) if n > 0 => (0..n).map(|i| xs[(i + n - k % n) % n].clone()).collect(),
            // identity, reverse and pairwise swap are involutions
            other => other.apply(xs),
        }
    }
}

impl fmt::Display for ReorderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReorderRule::Identity => f.write_str("identity"),
            ReorderRule::Reverse => f.write_str("reverse"),
            ReorderRule::SwapAdjacent => f.write_str("swap-adjacent"),
            ReorderRule::Rotate(k) => write!(f, "rotate-{k}"),
        }
    }
}

impl FromStr for ReorderRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(ReorderRule::Identity),
            "reverse" => Ok(ReorderRule::Reverse),
            "swap-adjacent" => Ok(ReorderRule::SwapAdjacent),
            _ => s
                .strip_prefix("rotate-")
                .and_then(|k| k.parse().ok())
                .map(ReorderRule::Rotate)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "unknown reorder rule `{s}` (expected identity, reverse, swap-adjacent or rotate-K)"
                    ))
                }),
        }
    }
}

impl TryFrom<String> for ReorderRule {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ReorderRule> for String {
    fn from(r: ReorderRule) -> String {
        r.to_string()
    }
}

/// A synthetic low-resource language derived from a random pivot language.
///
/// The pivot sentence is a string of base words `w<i>`. The low-resource side
/// reorders them, substitutes each word through a fixed permutation of the base
/// vocabulary (`cipher_seed = None` is the identity), and splits every word into
/// `fertility` pieces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLangSpec {
    pub base_vocab_size: usize,
    pub cipher_seed: Option<u64>,
    pub reorder_rule: ReorderRule,
    pub fertility: usize,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl SyntheticLangSpec {
    pub fn new(base_vocab_size: usize, cipher_seed: Option<u64>, reorder_rule: ReorderRule, fertility: usize) -> Self {
        Self {
            base_vocab_size,
            cipher_seed,
            reorder_rule,
            fertility,
            src_lang: "Synthetic".into(),
            tgt_lang: "Pivot".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_vocab_size == 0 {
            return Err(Error::Config("base vocabulary must be nonempty".into()));
        }
        if self.fertility == 0 {
            return Err(Error::Config("fertility must be at least 1".into()));
        }
        Ok(())
    }

    pub fn cipher(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.base_vocab_size).collect();
        if let Some(seed) = self.cipher_seed {
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
        perm
    }

    fn pieces(&self, word: usize) -> Vec<String> {
        if self.fertility == 1 {
            vec![format!("w{word}")]
        } else {
            (0..self.fertility).map(|j| format!("w{word}_{j}")).collect()
        }
    }

    /// Renders a pivot sentence (as base word ids) in the synthetic language.
    pub fn encode_source(&self, base: &[usize], cipher: &[usize]) -> Vec<String> {
        self.reorder_rule
            .apply(base)
            .into_iter()
            .flat_map(|w| self.pieces(cipher[w]))
            .collect()
    }
}

/// Generates `n` parallel pairs with sentence lengths drawn from `len_range`.
pub fn gen_corpus(
    spec: &SyntheticLangSpec,
    n: usize,
    len_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<Vec<ParallelExample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Config("corpus size must be at least 1".into()));
    }
    if *len_range.start() == 0 || len_range.is_empty() {
        return Err(Error::Config(format!(
            "invalid sentence length range {}..={}",
            len_range.start(),
            len_range.end()
        )));
    }
    let cipher = spec.cipher();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(len_range.clone());
            let base: Vec<usize> = (0..len).map(|_| rng.random_range(0..spec.base_vocab_size)).collect();
            let tgt: Vec<String> = base.iter().map(|w| format!("w{w}")).collect();
            let src = spec.encode_source(&base, &cipher);
            ParallelExample::new(src.join(" "), tgt.join(" "), &spec.src_lang, &spec.tgt_lang)
        })
        .collect()
}

/// Recovers the pivot sentence from a synthetic-language sentence.
pub fn invert_source(spec: &SyntheticLangSpec, src: &str) -> Result<String> {
    spec.validate()?;
    let cipher = spec.cipher();
    let mut inverse = vec![0usize; cipher.len()];
    for (w, &c) in cipher.iter().enumerate() {
        inverse[c] = w;
    }
    let tokens: Vec<&str> = src.split_whitespace().collect();
    if !tokens.len().is_multiple_of(spec.fertility) {
        return Err(Error::Invalid(format!("`{src}` is not a multiple of the fertility")));
    }
    let bad = || Error::Invalid(format!("`{src}` is not a sentence of this language"));
    let mut words = Vec::with_capacity(tokens.len() / spec.fertility);
    for group in tokens.chunks(spec.fertility) {
        let head = group[0].strip_prefix('w').ok_or_else(bad)?;
        let id: usize = head.split('_').next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if id >= inverse.len() || spec.pieces(id) != group {
            return Err(bad());
        }
        words.push(inverse[id]);
    }
    Ok(spec
        .reorder_rule
        .invert(&words)
        .iter()
        .map(|w| format!("w{w}"))
        .collect::<Vec<_>>()
        .join(" "))
}
