//! Greedy decoding and corpus scoring.

use serde::{Deserialize, Serialize};

use crate::data::{format_example, make_batch, Encoded, PadSide, ParallelExample, PromptMode, Vocab, BOS, EOS, PAD};
use crate::metrics::EvalReport;
use crate::model::{ForwardOptions, Model};
use crate::tensor::no_grad;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_src_len: usize,
    pub max_new_tokens: usize,
    /// Prompts decoded together (left-padded).
    pub batch_size: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_src_len: 256,
            max_new_tokens: 256,
            batch_size: 16,
        }
    }
}

/// Greedy continuation of each prompt until `EOS` or the token budget; the
/// returned ids exclude the prompt. `PAD` and `BOS` are never emitted.
pub fn greedy_decode(model: &Model, prompts: &[Encoded], cfg: &DecodeConfig) -> Result<Vec<Vec<u32>>> {
    if cfg.batch_size == 0 {
        return Err(Error::Config("decode batch size must be positive".into()));
    }
    let _guard = no_grad();
    let max_seq = model.config().max_seq_len;
    let vocab_size = model.config().vocab_size;
    let mut outputs = Vec::with_capacity(prompts.len());
    for chunk in prompts.chunks(cfg.batch_size) {
        let batch = make_batch(chunk, PadSide::Left, max_seq.saturating_sub(1).max(1))?;
        let (mut ids, mut mask) = (batch.ids, batch.mask);
        let mut generated = vec![Vec::new(); chunk.len()];
        let mut done = vec![false; chunk.len()];
        let budget = cfg.max_new_tokens.min(max_seq - ids[0].len());
        for _ in 0..budget {
            let out = model.forward(&ids, &mask, &ForwardOptions::eval())?;
            let logits = out.logits()?.data();
            let seq = ids[0].len();
            for (b, row) in ids.iter_mut().enumerate() {
                if done[b] {
                    row.push(PAD);
                    mask[b].push(false);
                    continue;
                }
                let last = &logits[(b * seq + seq - 1) * vocab_size..(b * seq + seq) * vocab_size];
                let next = last
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i as u32 != PAD && i as u32 != BOS)
                    .fold((EOS as usize, f64::NEG_INFINITY), |best, (i, &z)| {
                        if z > best.1 {
                            (i, z)
                        } else {
                            best
                        }
                    })
                    .0 as u32;
                row.push(next);
                mask[b].push(true);
                generated[b].push(next);
                done[b] = next == EOS;
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        outputs.extend(generated);
    }
    Ok(outputs)
}

/// Prompts for evaluation. Trained systems see the bare template, exactly as
/// in training minus the target.
pub fn eval_prompts(
    examples: &[ParallelExample],
    mode: PromptMode,
    pool: &[ParallelExample],
    vocab: &Vocab,
    max_src_len: usize,
) -> Result<Vec<Encoded>> {
    let mode = match mode {
        PromptMode::Train => PromptMode::ZeroShot,
        m => m,
    };
    examples
        .iter()
        .map(|ex| {
            Ok(Encoded::from_formatted(
                &format_example(ex, mode, pool)?,
                vocab,
                max_src_len,
                0,
            ))
        })
        .collect()
}

pub fn translate(
    model: &Model,
    vocab: &Vocab,
    examples: &[ParallelExample],
    mode: PromptMode,
    pool: &[ParallelExample],
    cfg: &DecodeConfig,
) -> Result<Vec<String>> {
    let prompts = eval_prompts(examples, mode, pool, vocab, cfg.max_src_len)?;
    Ok(greedy_decode(model, &prompts, cfg)?
        .iter()
        .map(|ids| vocab.detokenize(ids))
        .collect())
}

/// Decodes every example and scores the hypotheses against the targets.
pub fn evaluate(
    model: &Model,
    vocab: &Vocab,
    examples: &[ParallelExample],
    mode: PromptMode,
    pool: &[ParallelExample],
    cfg: &DecodeConfig,
) -> Result<EvalReport> {
    let first = examples
        .first()
        .ok_or_else(|| Error::Invalid("cannot evaluate an empty set".into()))?;
    let hyps = translate(model, vocab, examples, mode, pool, cfg)?;
    let refs: Vec<String> = examples.iter().map(|e| e.tgt_text.clone()).collect();
    EvalReport::score(&hyps, &refs, first.direction())
}
