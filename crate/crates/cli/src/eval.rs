use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use treplina::data::{PromptMode, Vocab};
use treplina::eval::{evaluate, DecodeConfig};
use treplina::metrics::EvalReport;
use treplina::model::Checkpoint;
use treplina::train::timestamp;

use crate::args::{EvalArgs, EvalMode, SplitChoice};
use crate::setup::{Corpus, RunLog};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub timestamp: String,
    pub checkpoint: String,
    pub mode: String,
    pub split: String,
    #[serde(flatten)]
    pub report: EvalReport,
}

impl EvalRecord {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", path.display()))
    }
}

/// Greedy-decodes the chosen split and writes `eval_report.json`. Trained
/// mode keeps the adapters on; zero- and few-shot prompting run the base
/// model with adapters off.
pub fn cmd_eval(args: &EvalArgs) -> Result<EvalRecord> {
    let ckpt = Checkpoint::load(&args.checkpoint)
        .with_context(|| format!("corrupt or unreadable checkpoint {}", args.checkpoint.display()))?;
    let mut model = ckpt
        .into_model()
        .with_context(|| format!("corrupt checkpoint {}", args.checkpoint.display()))?;
    let tokens = ckpt
        .vocabulary
        .clone()
        .ok_or_else(|| anyhow!("checkpoint {} carries no vocabulary", args.checkpoint.display()))?;
    if tokens.len() != ckpt.config.vocab_size {
        bail!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            tokens.len(),
            ckpt.config.vocab_size
        );
    }
    let vocab = Vocab::from(tokens);

    let mut log = RunLog::create(&args.out_dir, "eval")?;
    let prompt = match args.mode {
        EvalMode::Trained => PromptMode::Train,
        EvalMode::ZeroShot => PromptMode::ZeroShot,
        EvalMode::FewShot => {
            if ![1, 3, 5].contains(&args.k) {
                log.warn(format!(
                    "few-shot k = {} is outside the reference settings 1, 3, 5",
                    args.k
                ))?;
            }
            PromptMode::FewShot(args.k)
        }
    };
    let adapters = args.mode == EvalMode::Trained;
    if model.lora_config().is_some() {
        model.set_adapters_enabled(adapters)?;
    } else if adapters {
        log.warn("checkpoint has no adapters; scoring the base model")?;
    }

    let corpus = Corpus::load(&args.data)?;
    let (examples, split) = match args.split {
        SplitChoice::Train => (corpus.train.clone(), "train"),
        SplitChoice::Dev => (corpus.dev.clone(), "dev"),
        SplitChoice::All => (corpus.all(), "all"),
    };
    let decode = DecodeConfig {
        max_src_len: args.data.max_src_len,
        max_new_tokens: args.data.max_tgt_len,
        batch_size: args.eval_batch,
    };
    let report = evaluate(&model, &vocab, &examples, prompt, &corpus.train, &decode)?;
    let mode = match prompt {
        PromptMode::Train => "trained".to_string(),
        other => other.to_string(),
    };
    log.info(format!(
        "{mode} on {split} ({} pairs, {}): BLEU {:.2} ChrF {:.2} composite {:.2}",
        report.n_examples, report.direction, report.bleu, report.chrf, report.composite
    ))?;
    let record = EvalRecord {
        timestamp: timestamp(),
        checkpoint: args.checkpoint.display().to_string(),
        mode,
        split: split.to_string(),
        report,
    };
    record.write(&args.out_dir.join("eval_report.json"))?;
    Ok(record)
}
