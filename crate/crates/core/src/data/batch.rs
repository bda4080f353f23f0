use std::fmt;
use std::str::FromStr;

use super::{Formatted, Vocab, BOS, EOS, PAD};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadSide {
    Left,
    Right,
}

impl fmt::Display for PadSide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PadSide::Left => "left",
            PadSide::Right => "right",
        })
    }
}

impl FromStr for PadSide {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(PadSide::Left),
            "right" => Ok(PadSide::Right),
            _ => Err(Error::Config(format!("unknown pad side `{s}`"))),
        }
    }
}

/// A tokenized sequence in three segments: `prefix` (BOS plus instruction and
/// exemplars), `source` (the query sentence) and `target` (reference plus EOS,
/// empty for prompt-only and alignment sequences).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub prefix: Vec<u32>,
    pub source: Vec<u32>,
    pub target: Vec<u32>,
}

impl Encoded {
    pub fn from_formatted(f: &Formatted, vocab: &Vocab, max_src: usize, max_tgt: usize) -> Self {
        let mut prefix = vec![BOS];
        prefix.extend(vocab.tokenize(&f.prefix));
        let mut source = vocab.tokenize(&f.source);
        source.truncate(max_src);
        let target = match &f.target {
            Some(t) => {
                let mut ids = vocab.tokenize(t);
                ids.truncate(max_tgt.saturating_sub(1));
                ids.push(EOS);
                ids
            }
            None => Vec::new(),
        };
        Self { prefix, source, target }
    }

    /// `BOS` + sentence, for the source-only alignment passes.
    pub fn source_only(text: &str, vocab: &Vocab, max_src: usize) -> Self {
        let mut source = vocab.tokenize(text);
        source.truncate(max_src);
        Self {
            prefix: vec![BOS],
            source,
            target: Vec::new(),
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prefix.len() + self.source.len()
    }

    pub fn len(&self) -> usize {
        self.prompt_len() + self.target.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shortens the source first, then the target, to fit `max_len`.
    fn fit(&self, max_len: usize) -> Result<Encoded> {
        let mut e = self.clone();
        let mut excess = e.len().saturating_sub(max_len);
        let cut = excess.min(e.source.len());
        e.source.truncate(e.source.len() - cut);
        excess -= cut;
        let had_target = !e.target.is_empty();
        let cut = excess.min(e.target.len());
        e.target.truncate(e.target.len() - cut);
        excess -= cut;
        if excess > 0 || (had_target && e.target.is_empty()) {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens cannot fit max_len {max_len} without dropping the whole target",
                self.len()
            )));
        }
        Ok(e)
    }
}

/// Rectangular batch. `labels[b][t]` is the token at position `t` when that
/// position belongs to the target, `None` for prompt and padding positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<bool>>,
    pub labels: Vec<Vec<Option<u32>>>,
    pub seq: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.ids.len()
    }

    /// Flattened next-token targets: row `(b, t)` predicts `labels[b][t + 1]`.
    pub fn next_token_targets(&self) -> Vec<Option<usize>> {
        self.labels
            .iter()
            .flat_map(|row| (0..self.seq).map(move |t| row.get(t + 1).copied().flatten().map(|v| v as usize)))
            .collect()
    }

    pub fn n_targets(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }
}

pub fn make_batch(items: &[Encoded], pad_side: PadSide, max_len: usize) -> Result<Batch> {
    if items.is_empty() {
        return Err(Error::Invalid("cannot batch zero sequences".into()));
    }
    let fitted: Vec<Encoded> = items.iter().map(|e| e.fit(max_len)).collect::<Result<_>>()?;
    let seq = fitted.iter().map(Encoded::len).max().unwrap_or(0);
    if seq == 0 {
        return Err(Error::Invalid("all sequences are empty".into()));
    }
    let mut batch = Batch {
        ids: Vec::with_capacity(fitted.len()),
        mask: Vec::with_capacity(fitted.len()),
        labels: Vec::with_capacity(fitted.len()),
        seq,
    };
    for e in &fitted {
        let body: Vec<u32> = e.prefix.iter().chain(&e.source).chain(&e.target).copied().collect();
        let labels: Vec<Option<u32>> = body
            .iter()
            .enumerate()
            .map(|(i, &id)| (i >= e.prompt_len()).then_some(id))
            .collect();
        let pad = seq - body.len();
        let (ids, mask, labels) = match pad_side {
            PadSide::Left => (
                [vec![PAD; pad], body].concat(),
                [vec![false; pad], vec![true; e.len()]].concat(),
                [vec![None; pad], labels].concat(),
            ),
            PadSide::Right => (
                [body, vec![PAD; pad]].concat(),
                [vec![true; e.len()], vec![false; pad]].concat(),
                [labels, vec![None; pad]].concat(),
            ),
        };
        batch.ids.push(ids);
        batch.mask.push(mask);
        batch.labels.push(labels);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{format_example, ParallelExample, PromptMode};

    fn enc(n_src: usize, n_tgt: usize) -> Encoded {
        Encoded {
            prefix: vec![BOS, 10],
            source: (0..n_src as u32).map(|i| 20 + i).collect(),
            target: (0..n_tgt as u32).map(|i| 40 + i).collect(),
        }
    }

    #[test]
    fn left_padding_leads() {
        let short = Encoded {
            prefix: vec![BOS],
            source: vec![5, 6],
            target: vec![],
        };
        let long = Encoded {
            prefix: vec![BOS],
            source: vec![5, 6, 7, 8],
            target: vec![],
        };
        let b = make_batch(&[short, long], PadSide::Left, 64).unwrap();
        assert_eq!(b.ids[0], vec![PAD, PAD, BOS, 5, 6]);
        assert_eq!(b.mask[0], vec![false, false, true, true, true]);
    }

    #[test]
    fn right_padding_trails() {
        let b = make_batch(&[enc(1, 0), enc(3, 0)], PadSide::Right, 64).unwrap();
        assert_eq!(b.mask[0], vec![true, true, true, false, false]);
        assert_eq!(&b.ids[0][3..], &[PAD, PAD]);
    }

    #[test]
    fn labels_ignore_exactly_the_prompt() {
        let ex = ParallelExample::new("a b c", "x y", "A", "B").unwrap();
        let f = format_example(&ex, PromptMode::Train, &[]).unwrap();
        let vocab = Vocab::build([f.text().as_str()]);
        let e = Encoded::from_formatted(&f, &vocab, 256, 256);
        let b = make_batch(std::slice::from_ref(&e), PadSide::Left, 256).unwrap();
        let ignored = b.labels[0].iter().take_while(|l| l.is_none()).count();
        assert_eq!(ignored, e.prompt_len());
        // BOS + "Translate to B:" + 3 source tokens
        assert_eq!(e.prompt_len(), 1 + 3 + 3);
        assert_eq!(b.n_targets(), 3);
        let targets = b.next_token_targets();
        assert_eq!(targets.iter().flatten().count(), 3);
        assert_eq!(targets[e.prompt_len() - 1], Some(b.ids[0][e.prompt_len()] as usize));
    }

    #[test]
    fn truncation_cuts_source_before_target() {
        let b = make_batch(&[enc(6, 3)], PadSide::Left, 8).unwrap();
        assert_eq!(b.ids[0], vec![BOS, 10, 20, 21, 22, 40, 41, 42]);
        assert!(make_batch(&[enc(6, 3)], PadSide::Left, 2).is_err());
        assert_eq!(
            make_batch(&[enc(0, 5)], PadSide::Left, 4).unwrap().ids[0],
            vec![BOS, 10, 40, 41]
        );
    }

    #[test]
    fn long_fertility_fits_larger_cap() {
        let long = enc(300, 60);
        assert!(make_batch(std::slice::from_ref(&long), PadSide::Left, 368).is_ok());
        let b = make_batch(&[long], PadSide::Left, 256).unwrap();
        assert_eq!(b.seq, 256);
        assert_eq!(b.n_targets(), 60);
    }
}
