//! Step-2 training at a fixed layer.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::{Deserialize, Serialize};
use treplina::align::{layer_cka, AlignmentConfig};
use treplina::train::{mean_mt_loss, timestamp, train_run, EpochResult, TrainConfig};

use crate::args::TrainArgs;
use crate::setup::{default_layer, pretrained_base, train_config, write_jsonl, Corpus, RunLog};
use crate::sweep::Method;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub timestamp: String,
    pub method: Method,
    pub layer: usize,
    pub lambda: f64,
    pub mu: f64,
    /// 1-based epoch with the highest dev composite.
    pub best_epoch: usize,
    pub best_composite: f64,
    /// Token-weighted translation loss over the training split, before the
    /// first update and after the last.
    pub initial_l_mt: f64,
    pub final_l_mt: f64,
    /// Dev CKA at `layer` for the final model.
    pub final_cka: f64,
    pub data: String,
    pub n_train: usize,
    pub n_dev: usize,
    pub pretrain_steps: usize,
    pub pretrain_loss: Option<(f64, f64)>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(clippy::large_enum_variant)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainLine {
    Epoch(EpochResult),
    Summary(TrainSummary),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochResult>,
    pub summary: TrainSummary,
}

impl TrainReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let lines: Vec<TrainLine> = self
            .epochs
            .iter()
            .cloned()
            .map(TrainLine::Epoch)
            .chain([TrainLine::Summary(self.summary.clone())])
            .collect();
        write_jsonl(path, &lines)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let (mut epochs, mut summary) = (Vec::new(), None);
        for (i, line) in BufReader::new(file).lines().enumerate() {
            match serde_json::from_str(&line?).with_context(|| format!("{}:{}", path.display(), i + 1))? {
                TrainLine::Epoch(e) => epochs.push(e),
                TrainLine::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| anyhow!("{} has no summary record", path.display()))?;
        Ok(Self { epochs, summary })
    }
}

/// Pretrains the base, trains adapters for `epochs` with per-epoch dev
/// evaluation, and writes `train_report.jsonl`, `train_log.jsonl`,
/// `best.ckpt.json`, `final.ckpt.json` and a run log.
pub fn cmd_train(args: &TrainArgs) -> Result<TrainReport> {
    let n_layers = args.training.n_layers;
    let layer = args.layer.unwrap_or(default_layer(n_layers));
    let method = Method::from_weights(args.lambda, args.mu);
    let align = AlignmentConfig {
        repina_cadence: args.training.repina_cadence,
        ..AlignmentConfig::new(layer, args.lambda, args.mu)
    };
    align.validate(n_layers)?;
    let align = (method != Method::NoAlign).then_some(align);
    let cfg = train_config(&args.data, &args.training, args.epochs);
    cfg.validate()?;

    let mut log = RunLog::create(&args.out_dir, "train")?;
    if args.lambda >= 0.3 {
        log.warn(format!(
            "lambda {} is large; CKA weights around 0.3 degraded translation quality in the reference sweeps",
            args.lambda
        ))?;
    }
    let corpus = Corpus::load(&args.data)?;
    let vocab = corpus.vocab();
    log.info(format!(
        "{method} at layer {layer} (lambda {}, mu {}): {} train / {} dev pairs, vocabulary {}",
        args.lambda,
        args.mu,
        corpus.train.len(),
        corpus.dev.len(),
        vocab.len()
    ))?;
    let (base, pretrain_loss) = pretrained_base(&corpus, &vocab, &args.data, &args.training)?;
    if let Some((first, last)) = pretrain_loss {
        log.info(format!("base pretraining loss {first:.4} -> {last:.4}"))?;
    }

    let mut model = base.into_model()?;
    model.attach_lora(&cfg.lora)?;
    let initial_l_mt = mean_mt_loss(&model, &vocab, &corpus.train, &cfg)?;
    let outcome = train_run(
        &mut model,
        &vocab,
        &corpus.train,
        &corpus.dev,
        align.as_ref(),
        &cfg,
        &mut |_| {},
    )?;
    let final_l_mt = mean_mt_loss(&model, &vocab, &corpus.train, &cfg)?;
    let probe = &corpus.dev[..corpus.dev.len().min(cfg.dev_eval_cap)];
    let final_cka = layer_cka(&model, &vocab, probe, layer, (cfg.max_src_len, cfg.max_tgt_len), 1)?;
    for e in &outcome.epochs {
        log.info(format!(
            "epoch {}: {} steps, mean L_mt {:.4}, dev BLEU {:.2} ChrF {:.2} composite {:.2}",
            e.epoch, e.optimizer_steps, e.mean_l_mt, e.dev.bleu, e.dev.chrf, e.dev.composite
        ))?;
    }

    let best = outcome.best_epoch();
    log.info(format!(
        "best epoch {} (composite {:.2}); train L_mt {initial_l_mt:.4} -> {final_l_mt:.4}; CKA at layer {layer} {final_cka:.4}",
        best.epoch, best.dev.composite
    ))?;
    outcome.best_checkpoint().save(args.out_dir.join("best.ckpt.json"))?;
    outcome
        .checkpoints
        .last()
        .expect("at least one epoch")
        .save(args.out_dir.join("final.ckpt.json"))?;
    write_jsonl(&args.out_dir.join("train_log.jsonl"), &outcome.logs)?;

    let report = TrainReport {
        summary: TrainSummary {
            timestamp: timestamp(),
            method,
            layer,
            lambda: args.lambda,
            mu: args.mu,
            best_epoch: best.epoch,
            best_composite: best.dev.composite,
            initial_l_mt,
            final_l_mt,
            final_cka,
            data: args.data.data.display().to_string(),
            n_train: corpus.train.len(),
            n_dev: corpus.dev.len(),
            pretrain_steps: args.training.pretrain_steps,
            pretrain_loss,
            train: cfg,
        },
        epochs: outcome.epochs,
    };
    report.write(&args.out_dir.join("train_report.jsonl"))?;
    Ok(report)
}
