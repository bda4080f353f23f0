//! Corpus BLEU-4, chrF (β = 2, character orders 1..=6) and the 0.6/0.4
//! composite used to rank systems.

use std::collections::HashMap;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

use crate::{Error, Result};

const BLEU_ORDER: usize = 4;
const CHRF_ORDER: usize = 6;
const CHRF_BETA: f64 = 2.0;
const PRECISION_FLOOR: f64 = 1e-16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: f64,
    pub chrf: f64,
    pub composite: f64,
    pub n_examples: usize,
    pub direction: String,
}

impl EvalReport {
    pub fn score(hypotheses: &[String], references: &[String], direction: impl Into<String>) -> Result<Self> {
        let bleu = bleu(hypotheses, references)?;
        let chrf = chrf(hypotheses, references)?;
        Ok(Self {
            bleu,
            chrf,
            composite: composite(bleu, chrf),
            n_examples: hypotheses.len(),
            direction: direction.into(),
        })
    }
}

pub fn composite(bleu: f64, chrf: f64) -> f64 {
    0.6 * bleu + 0.4 * chrf
}

fn check_corpus<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::Invalid("cannot score an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<T: Eq + Hash + Clone>(items: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && items.len() >= n {
        for w in items.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches, hypothesis total, reference total.
fn overlap<T: Eq + Hash + Clone>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matches = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matches, h.values().sum(), r.values().sum())
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// Corpus BLEU-4 on NFC-normalized whitespace tokens, in `[0, 100]`.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut matches = [0usize; BLEU_ORDER];
    let mut totals = [0usize; BLEU_ORDER];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (nfc(h.as_ref()), nfc(r.as_ref()));
        let ht: Vec<&str> = h.split_whitespace().collect();
        let rt: Vec<&str> = r.split_whitespace().collect();
        hyp_len += ht.len();
        ref_len += rt.len();
        for n in 1..=BLEU_ORDER {
            let (m, t, _) = overlap(&ht, &rt, n);
            matches[n - 1] += m;
            totals[n - 1] += t;
        }
    }
    if hyp_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..BLEU_ORDER)
        .map(|i| {
            let p = if totals[i] == 0 {
                0.0
            } else {
                matches[i] as f64 / totals[i] as f64
            };
            p.max(PRECISION_FLOOR).ln()
        })
        .sum::<f64>()
        / BLEU_ORDER as f64;
    let bp = (1.0 - ref_len as f64 / hyp_len as f64).min(0.0).exp();
    Ok((100.0 * bp * log_precision.exp()).clamp(0.0, 100.0))
}

/// Corpus chrF: statistics are summed over segments, precision and recall
/// are averaged over the orders present in both sides, then combined as F_β.
pub fn chrf<H: AsRef<str>, R: AsRef<str>>(hypotheses: &[H], references: &[R]) -> Result<f64> {
    check_corpus(hypotheses, references)?;
    let mut stats = [(0usize, 0usize, 0usize); CHRF_ORDER];
    for (h, r) in hypotheses.iter().zip(references) {
        let hc: Vec<char> = nfc(h.as_ref()).chars().filter(|c| !c.is_whitespace()).collect();
        let rc: Vec<char> = nfc(r.as_ref()).chars().filter(|c| !c.is_whitespace()).collect();
        for n in 1..=CHRF_ORDER {
            let (m, th, tr) = overlap(&hc, &rc, n);
            let s = &mut stats[n - 1];
            s.0 += m;
            s.1 += th;
            s.2 += tr;
        }
    }
    Ok(chrf_from_stats(&stats))
}

fn chrf_from_stats(stats: &[(usize, usize, usize)]) -> f64 {
    let (mut p, mut r, mut orders) = (0.0, 0.0, 0usize);
    for &(m, th, tr) in stats {
        if th > 0 && tr > 0 {
            p += m as f64 / th as f64;
            r += m as f64 / tr as f64;
            orders += 1;
        }
    }
    if orders == 0 {
        return 0.0;
    }
    let (p, r) = (p / orders as f64, r / orders as f64);
    if p + r == 0.0 {
        return 0.0;
    }
    let b2 = CHRF_BETA * CHRF_BETA;
    (100.0 * (1.0 + b2) * p * r / (b2 * p + r)).clamp(0.0, 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn bleu_examples() {
        let b = bleu(&s(&["a b c d"]), &s(&["a b c d e"])).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((b - 77.88).abs() < 0.01);
        assert_eq!(bleu(&s(&["x y z w"]), &s(&["x y z w"])).unwrap(), 100.0);
        assert!(bleu(&s(&["p q r s"]), &s(&["a b c d"])).unwrap() < 1e-6);
        assert_eq!(bleu(&s(&[""]), &s(&["a"])).unwrap(), 0.0);
    }

    #[test]
    fn chrf_examples() {
        assert_eq!(chrf(&s(&["abc"]), &s(&["abc"])).unwrap(), 100.0);
        assert!((chrf(&s(&["abc"]), &s(&["abd"])).unwrap() - 700.0 / 18.0).abs() < 1e-9);
        assert_eq!(chrf(&s(&[""]), &s(&["abc"])).unwrap(), 0.0);
        // whitespace never enters the n-grams
        assert_eq!(chrf(&s(&["a b c"]), &s(&["abc"])).unwrap(), 100.0);
    }

    #[test]
    fn nfc_equivalent_text_matches() {
        let composed = "\u{00e9}t\u{00e9} a b c";
        let decomposed = "e\u{0301}te\u{0301} a b c";
        assert_eq!(bleu(&[composed], &[decomposed]).unwrap(), 100.0);
        assert_eq!(chrf(&[decomposed], &[composed]).unwrap(), 100.0);
    }

    #[test]
    fn corpus_errors() {
        let empty: [&str; 0] = [];
        assert!(bleu(&empty, &empty).is_err());
        assert!(chrf(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn composite_examples() {
        assert!((composite(40.15, 59.67) - 47.96).abs() < 0.01);
        assert!((composite(25.94, 46.68) - 34.24).abs() < 0.01);
        assert_eq!(composite(0.0, 0.0), 0.0);
    }

    #[test]
    fn corpus_order_is_irrelevant() {
        let h = s(&["a b c", "d e", "f g h i"]);
        let r = s(&["a b x", "d e", "f h g i"]);
        let (hr, rr): (Vec<_>, Vec<_>) = h.iter().cloned().zip(r.iter().cloned()).rev().unzip();
        assert_eq!(bleu(&h, &r).unwrap(), bleu(&hr, &rr).unwrap());
        assert_eq!(chrf(&h, &r).unwrap(), chrf(&hr, &rr).unwrap());
    }

    #[test]
    fn report_composite_consistent() {
        let rep = EvalReport::score(&s(&["a b c d"]), &s(&["a b c e"]), "A->B").unwrap();
        assert!((rep.composite - (0.6 * rep.bleu + 0.4 * rep.chrf)).abs() < 1e-9);
        assert_eq!(rep.n_examples, 1);
    }
}
