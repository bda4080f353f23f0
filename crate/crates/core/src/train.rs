//! Adapter fine-tuning: label-smoothed causal-LM loss on prompt-masked
//! targets, optional alignment terms, AdamW with warmup and global-norm
//! clipping, token-weighted gradient accumulation and per-epoch selection.

use chrono::{SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{cka_loss, combined_loss, gather_layer_states, repina_loss, source_only_pair, AlignmentConfig};
use crate::data::{format_example, make_batch, mix_seed, Batch, Encoded, PadSide, ParallelExample, PromptMode, Vocab};
use crate::eval::{evaluate, DecodeConfig};
use crate::metrics::EvalReport;
use crate::model::{Checkpoint, ForwardOptions, LoraConfig, Model};
use crate::tensor::{no_grad, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_accum: usize,
    pub micro_batch: usize,
    pub epochs: usize,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    /// Accepted for parity with padded GPU kernels; has no effect here.
    pub pad_to_multiple_of_8: bool,
    pub seed: u64,
    pub lora: LoraConfig,
    /// Development pairs decoded after each epoch.
    pub dev_eval_cap: usize,
    pub eval_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            warmup_ratio: 0.05,
            betas: (0.9, 0.95),
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_accum: 16,
            micro_batch: 1,
            epochs: 1,
            clip_norm: 1.0,
            label_smoothing: 0.1,
            max_src_len: 256,
            max_tgt_len: 256,
            pad_to_multiple_of_8: false,
            seed: 0,
            lora: LoraConfig::default(),
            dev_eval_cap: crate::data::DEV_EVAL_CAP,
            eval_batch: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return bad("warmup ratio must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad("label smoothing must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.clip_norm <= 0.0 || self.adam_eps <= 0.0 {
            return bad("weight decay must be nonnegative; clip norm and Adam epsilon positive");
        }
        let counts = [
            self.grad_accum,
            self.micro_batch,
            self.epochs,
            self.max_src_len,
            self.max_tgt_len,
            self.dev_eval_cap,
            self.eval_batch,
        ];
        if counts.contains(&0) {
            return bad("counts (grad_accum, micro_batch, epochs, max lengths, eval sizes) must be positive");
        }
        self.lora.validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> u64 {
        n_train.div_ceil(self.micro_batch * self.grad_accum) as u64
    }

    pub fn decode_config(&self) -> DecodeConfig {
        DecodeConfig {
            max_src_len: self.max_src_len,
            max_new_tokens: self.max_tgt_len,
            batch_size: self.eval_batch,
        }
    }
}

/// Linear warmup from 0 over `ceil(ratio · total)` steps, then constant.
pub fn lr_at(step: u64, total_steps: u64, cfg: &TrainConfig) -> f64 {
    let warmup = (cfg.warmup_ratio * total_steps as f64).ceil() as u64;
    if step >= warmup {
        cfg.lr
    } else {
        cfg.lr * step as f64 / warmup as f64
    }
}

/// Label-smoothed next-token loss: position `t` predicts `labels[b][t + 1]`;
/// `None` labels (prompt and padding) are ignored.
pub fn label_smoothed_ce(logits: &Tensor, labels: &[Vec<Option<u32>>], eps: f64) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 3 || labels.len() != s[0] || labels.iter().any(|r| r.len() != s[1]) {
        let got = [labels.len(), labels.first().map_or(0, Vec::len)];
        return Err(Error::shape("label_smoothed_ce", s, &got));
    }
    let targets: Vec<Option<usize>> = labels
        .iter()
        .flat_map(|row| (0..row.len()).map(move |t| row.get(t + 1).copied().flatten().map(|v| v as usize)))
        .collect();
    logits.smoothed_cross_entropy(&targets, eps)
}

/// Rescales gradients so their global norm is at most `max_norm` and returns
/// the norm before clipping.
pub fn clip_grad_norm(params: &[Tensor], max_norm: f64, step: u64) -> Result<f64> {
    let grads: Vec<Vec<f64>> = params.iter().filter_map(Tensor::grad).collect();
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient at optimizer step {step}")));
    }
    if norm > max_norm {
        let c = max_norm / norm;
        for p in params {
            if let Some(g) = p.grad() {
                p.set_grad(g.iter().map(|v| v * c).collect());
            }
        }
    }
    Ok(norm)
}

/// AdamW with decoupled weight decay. Moments persist across steps; a
/// parameter without a gradient is left untouched.
pub struct AdamW {
    params: Vec<Tensor>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: Vec<Tensor>, cfg: &TrainConfig) -> Self {
        let zeros = |p: &Tensor| vec![0.0; p.numel()];
        Self {
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
            params,
            t: 0,
            betas: cfg.betas,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn step(&mut self, lr: f64) {
        self.t += 1;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for ((p, m), v) in self.params.iter().zip(&mut self.m).zip(&mut self.v) {
            let Some(g) = p.grad() else { continue };
            p.update_data(|w| {
                for i in 0..w.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                    w[i] *= decay;
                    w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            });
        }
    }
}

/// Clips, then applies one AdamW update. Returns the pre-clip gradient norm.
pub fn optimizer_step(opt: &mut AdamW, lr: f64, cfg: &TrainConfig, step: u64) -> Result<f64> {
    let norm = clip_grad_norm(opt.params(), cfg.clip_norm, step)?;
    opt.step(lr);
    Ok(norm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub timestamp: String,
    pub step: u64,
    pub micro_step: u64,
    pub l_mt: f64,
    pub l_cka: Option<f64>,
    pub l_repina: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub cka_similarity: Option<f64>,
}

pub fn timestamp() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

/// Position of a micro-batch within the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepIndex {
    pub optimizer_step: u64,
    pub micro_step: u64,
}

pub fn encode_for_training(examples: &[ParallelExample], vocab: &Vocab, cfg: &TrainConfig) -> Result<Vec<Encoded>> {
    examples
        .iter()
        .map(|ex| {
            let f = format_example(ex, PromptMode::Train, &[])?;
            Ok(Encoded::from_formatted(&f, vocab, cfg.max_src_len, cfg.max_tgt_len))
        })
        .collect()
}

pub fn training_batch(model: &Model, examples: &[ParallelExample], vocab: &Vocab, cfg: &TrainConfig) -> Result<Batch> {
    make_batch(
        &encode_for_training(examples, vocab, cfg)?,
        PadSide::Left,
        model.config().max_seq_len,
    )
}

const PASS_MT: u64 = 1;
const PASS_LRL: u64 = 2;
const PASS_HRL: u64 = 3;

/// Forward and backward for one micro-batch; gradients accumulate into the
/// adapter parameters. The translation loss is multiplied by `mt_weight` and
/// the alignment terms by `align_weight` before backward; the returned record
/// holds the unweighted values.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut Model,
    examples: &[ParallelExample],
    vocab: &Vocab,
    align: Option<&AlignmentConfig>,
    cfg: &TrainConfig,
    idx: StepIndex,
    (mt_weight, align_weight): (f64, f64),
    lr: f64,
) -> Result<TrainLogRecord> {
    let seed = mix_seed(cfg.seed, idx.micro_step);
    let batch = training_batch(model, examples, vocab, cfg)?;
    let out = model.forward(
        &batch.ids,
        &batch.mask,
        &ForwardOptions::default().with_dropout(Some(mix_seed(seed, PASS_MT))),
    )?;
    let l_mt = label_smoothed_ce(out.logits()?, &batch.labels, cfg.label_smoothing)?;
    drop(out);

    let (mut l_cka, mut l_rep) = (None, None);
    let apply_rep = align.is_some_and(|a| a.repina_due(idx.optimizer_step));
    if let Some(a) = align.filter(|a| a.uses_cka() || apply_rep) {
        let cap = model.config().max_seq_len;
        let (ea, eb) = source_only_pair(examples, vocab, cfg.max_src_len, cfg.max_tgt_len);
        let bb = make_batch(&eb, PadSide::Right, cap)?;
        let opts = |pass| ForwardOptions::hidden_up_to(a.layer).with_dropout(Some(mix_seed(seed, pass)));
        let hb = gather_layer_states(&model.forward(&bb.ids, &bb.mask, &opts(PASS_HRL))?, a.layer, &bb.mask)?;
        if a.uses_cka() {
            let ba = make_batch(&ea, PadSide::Right, cap)?;
            let ha = gather_layer_states(&model.forward(&ba.ids, &ba.mask, &opts(PASS_LRL))?, a.layer, &ba.mask)?;
            l_cka = Some(cka_loss(&ha, &hb)?);
        }
        if apply_rep {
            let reference = {
                let _guard = no_grad();
                let was_on = model.adapters_enabled();
                model.set_adapters_enabled(false)?;
                let out = model.forward(&bb.ids, &bb.mask, &ForwardOptions::hidden_up_to(a.layer));
                model.set_adapters_enabled(was_on)?;
                gather_layer_states(&out?, a.layer, &bb.mask)?
            };
            l_rep = Some(repina_loss(&hb, &reference)?);
        }
    }

    let weighted_mt = l_mt.scale(mt_weight);
    let loss = match align {
        None => weighted_mt,
        Some(a) => {
            let c = l_cka.as_ref().map(|c| c.scale(align_weight));
            let r = l_rep.as_ref().map(|r| r.scale(align_weight));
            combined_loss(&weighted_mt, c.as_ref(), r.as_ref(), a, apply_rep)?
        }
    };
    if !loss.item().is_finite() {
        return Err(Error::NonFinite(format!(
            "loss at optimizer step {} (micro-step {})",
            idx.optimizer_step, idx.micro_step
        )));
    }
    loss.backward()?;

    let (mt, c, r) = (
        l_mt.item(),
        l_cka.as_ref().map(Tensor::item),
        l_rep.as_ref().map(Tensor::item),
    );
    let total = match align {
        None => mt,
        Some(a) => mt + c.map_or(0.0, |c| a.lambda * c) + r.map_or(0.0, |r| a.mu * r),
    };
    Ok(TrainLogRecord {
        timestamp: timestamp(),
        step: idx.optimizer_step,
        micro_step: idx.micro_step,
        l_mt: mt,
        l_cka: c,
        l_repina: r,
        total,
        lr,
        cka_similarity: c.map(|c| 1.0 - c),
    })
}

/// Runs every micro-batch of one optimizer step. The translation loss of each
/// micro-batch is weighted by its share of the window's target tokens, so the
/// accumulated gradient equals that of the concatenated batch; alignment
/// terms are averaged over micro-batches.
#[allow(clippy::too_many_arguments)]
pub fn accumulate(
    model: &mut Model,
    micro_batches: &[&[ParallelExample]],
    vocab: &Vocab,
    align: Option<&AlignmentConfig>,
    cfg: &TrainConfig,
    optimizer_step: u64,
    first_micro_step: u64,
    lr: f64,
) -> Result<Vec<TrainLogRecord>> {
    let tokens: Vec<usize> = micro_batches
        .iter()
        .map(|mb| Ok(training_batch(model, mb, vocab, cfg)?.n_targets()))
        .collect::<Result<_>>()?;
    let window: usize = tokens.iter().sum();
    if window == 0 {
        return Err(Error::Invalid("optimizer step without target tokens".into()));
    }
    let k = micro_batches.len() as f64;
    micro_batches
        .iter()
        .zip(&tokens)
        .enumerate()
        .map(|(i, (mb, &n))| {
            let idx = StepIndex {
                optimizer_step,
                micro_step: first_micro_step + i as u64,
            };
            let weights = if micro_batches.len() == 1 {
                (1.0, 1.0)
            } else {
                (n as f64 / window as f64, 1.0 / k)
            };
            train_step(model, mb, vocab, align, cfg, idx, weights, lr)
        })
        .collect()
}

/// Token-weighted translation loss over `examples` without dropout or graph.
pub fn mean_mt_loss(model: &Model, vocab: &Vocab, examples: &[ParallelExample], cfg: &TrainConfig) -> Result<f64> {
    let _guard = no_grad();
    let (mut sum, mut tokens) = (0.0, 0usize);
    for chunk in examples.chunks(cfg.micro_batch.max(8)) {
        let batch = training_batch(model, chunk, vocab, cfg)?;
        let out = model.forward(&batch.ids, &batch.mask, &ForwardOptions::eval())?;
        let n = batch.n_targets();
        sum += label_smoothed_ce(out.logits()?, &batch.labels, cfg.label_smoothing)?.item() * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::Invalid("no target tokens to score".into()));
    }
    Ok(sum / tokens as f64)
}

/// Full-parameter language-model training of a fresh base model on
/// monolingual sentences, standing in for the pretrained multilingual model
/// that adapters are later attached to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 400,
            lr: 3e-3,
            batch: 16,
            max_len: 64,
            seed: 0,
        }
    }
}

/// Trains every base parameter on `BOS sentence EOS` sequences drawn by a
/// seeded cycling shuffle. Returns the per-step losses.
pub fn pretrain_base(model: &mut Model, vocab: &Vocab, sentences: &[String], cfg: &PretrainConfig) -> Result<Vec<f64>> {
    if model.lora_config().is_some() {
        return Err(Error::Config("pretraining runs before adapters are attached".into()));
    }
    if sentences.is_empty() || cfg.batch == 0 || cfg.max_len < 2 {
        return Err(Error::Invalid(
            "pretraining needs sentences, a positive batch and max_len >= 2".into(),
        ));
    }
    let encoded: Vec<Encoded> = sentences
        .iter()
        .map(|s| Encoded {
            prefix: vec![crate::data::BOS],
            source: Vec::new(),
            target: {
                let mut ids = vocab.tokenize(s);
                ids.truncate(cfg.max_len - 2);
                ids.push(crate::data::EOS);
                ids
            },
        })
        .collect();
    let params: Vec<Tensor> = model.base_parameters().into_iter().map(|(_, t)| t).collect();
    let adam = TrainConfig {
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut opt = AdamW::new(params, &adam);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7072_6574));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picked = Vec::with_capacity(cfg.batch);
        while picked.len() < cfg.batch {
            if order.is_empty() {
                order = (0..encoded.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(encoded[order.pop().expect("refilled above")].clone());
        }
        let batch = make_batch(&picked, PadSide::Left, model.config().max_seq_len)?;
        model.zero_grad();
        let out = model.forward(&batch.ids, &batch.mask, &ForwardOptions::eval())?;
        let loss = label_smoothed_ce(out.logits()?, &batch.labels, 0.0)?;
        loss.backward()?;
        clip_grad_norm(opt.params(), adam.clip_norm, step as u64)?;
        opt.step(cfg.lr);
        losses.push(loss.item());
    }
    model.zero_grad();
    Ok(losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochResult {
    /// 1-based.
    pub epoch: usize,
    pub optimizer_steps: u64,
    pub mean_l_mt: f64,
    pub dev: EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochResult>,
    pub checkpoints: Vec<Checkpoint>,
    /// Index into `epochs` of the highest development composite (earliest on ties).
    pub best: usize,
    pub logs: Vec<TrainLogRecord>,
}

impl TrainOutcome {
    pub fn best_epoch(&self) -> &EpochResult {
        &self.epochs[self.best]
    }

    pub fn best_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.best]
    }
}

/// Index of the largest composite, earliest on ties.
pub fn select_best(reports: &[EvalReport]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in reports.iter().enumerate() {
        if best.is_none_or(|b| r.composite > reports[b].composite) {
            best = Some(i);
        }
    }
    best
}

/// Multi-epoch training with a development evaluation and an in-memory
/// checkpoint after each epoch. Attaches adapters from `cfg.lora` when the
/// model has none. `on_record` sees every micro-step record as it is made.
pub fn train_run(
    model: &mut Model,
    vocab: &Vocab,
    train: &[ParallelExample],
    dev: &[ParallelExample],
    align: Option<&AlignmentConfig>,
    cfg: &TrainConfig,
    on_record: &mut dyn FnMut(&TrainLogRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    if dev.is_empty() {
        return Err(Error::Invalid("development set is empty".into()));
    }
    if let Some(a) = align {
        a.validate(model.n_layers())?;
    }
    if model.lora_config().is_none() {
        model.attach_lora(&cfg.lora)?;
    }
    model.set_adapters_enabled(true)?;
    let dev = &dev[..dev.len().min(cfg.dev_eval_cap)];
    let per_epoch = cfg.steps_per_epoch(train.len());
    let total_steps = per_epoch * cfg.epochs as u64;
    let mut opt = AdamW::new(model.trainable_parameters(), cfg);
    let (mut step, mut micro) = (0u64, 0u64);
    let mut outcome = TrainOutcome {
        epochs: Vec::new(),
        checkpoints: Vec::new(),
        best: 0,
        logs: Vec::new(),
    };

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<&ParallelExample> = train.iter().collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            cfg.seed,
            0x6570_6f63_6800 + epoch as u64,
        )));
        let order: Vec<ParallelExample> = order.into_iter().cloned().collect();
        let (mut loss_sum, mut loss_n) = (0.0, 0usize);
        for window in order.chunks(cfg.micro_batch * cfg.grad_accum) {
            let micro_batches: Vec<&[ParallelExample]> = window.chunks(cfg.micro_batch).collect();
            let lr = lr_at(step, total_steps, cfg);
            model.zero_grad();
            let records = accumulate(model, &micro_batches, vocab, align, cfg, step, micro, lr)?;
            optimizer_step(&mut opt, lr, cfg, step)?;
            for r in records {
                loss_sum += r.l_mt;
                loss_n += 1;
                on_record(&r);
                outcome.logs.push(r);
            }
            micro += micro_batches.len() as u64;
            step += 1;
        }
        model.zero_grad();
        let report = evaluate(model, vocab, dev, PromptMode::Train, &[], &cfg.decode_config())?;
        log::info!(
            "epoch {epoch}: {step} optimizer steps, mean L_mt {:.4}, dev BLEU {:.2} ChrF {:.2} composite {:.2}",
            loss_sum / loss_n as f64,
            report.bleu,
            report.chrf,
            report.composite
        );
        let mut ckpt = Checkpoint::from_model(model, step);
        ckpt.vocabulary = Some(vocab.tokens().to_vec());
        ckpt.src_lang = Some(train[0].src_lang.clone());
        ckpt.tgt_lang = Some(train[0].tgt_lang.clone());
        outcome.checkpoints.push(ckpt);
        outcome.epochs.push(EpochResult {
            epoch,
            optimizer_steps: step,
            mean_l_mt: loss_sum / loss_n as f64,
            dev: report,
        });
    }
    let reports: Vec<EvalReport> = outcome.epochs.iter().map(|e| e.dev.clone()).collect();
    outcome.best = select_best(&reports).expect("at least one epoch");
    Ok(outcome)
}
