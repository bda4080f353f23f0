//! Parallel corpora: synthetic generation, CSV ingestion, splits, tokenization,
//! prompt formatting and batch assembly.

mod batch;
mod corpus;
mod prompt;
mod synth;
mod tokenizer;

pub use batch::{make_batch, Batch, Encoded, PadSide};
pub use corpus::{dev_count, load_csv, split, write_csv, LoadedCorpus, SplitSpec, DEV_EVAL_CAP};
pub use prompt::{format_example, prompt_template, Formatted, PromptMode};
pub use synth::{gen_corpus, invert_source, ReorderRule, SyntheticLangSpec};
pub use tokenizer::{Vocab, BOS, EOS, PAD, UNK};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One sentence pair: `src` is the low-resource side, `tgt` the pivot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParallelExample {
    pub src_text: String,
    pub tgt_text: String,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl ParallelExample {
    pub fn new(
        src_text: impl Into<String>,
        tgt_text: impl Into<String>,
        src_lang: impl Into<String>,
        tgt_lang: impl Into<String>,
    ) -> Result<Self> {
        let ex = Self {
            src_text: src_text.into(),
            tgt_text: tgt_text.into(),
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
        };
        if ex.src_text.trim().is_empty() || ex.tgt_text.trim().is_empty() {
            return Err(Error::Invalid(
                "both sides of a parallel example must be nonempty".into(),
            ));
        }
        Ok(ex)
    }

    pub fn direction(&self) -> String {
        format!("{}->{}", self.src_lang, self.tgt_lang)
    }
}

/// SplitMix64 over a pair; used to derive independent RNG streams from one seed.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.rotate_left(32) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
