//! Loading, splitting and base-model preparation shared by the commands.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use treplina::data::{load_csv, prompt_template, split, ParallelExample, SyntheticLangSpec, Vocab};
use treplina::model::{Checkpoint, LoraConfig, Model, ModelConfig};
use treplina::train::{pretrain_base, PretrainConfig, TrainConfig};

use crate::args::{DataArgs, TrainingArgs};

/// Exemplar blocks a few-shot prompt may hold on top of the query.
const MAX_SHOTS: usize = 5;

/// Generation record written beside a synthetic CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSidecar {
    pub spec: SyntheticLangSpec,
    pub n: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
    pub src_col: String,
    pub tgt_col: String,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".spec.json");
    PathBuf::from(name)
}

pub struct Corpus {
    pub train: Vec<ParallelExample>,
    pub dev: Vec<ParallelExample>,
}

impl Corpus {
    pub fn load(args: &DataArgs) -> Result<Self> {
        let sidecar: Option<CorpusSidecar> = match fs::read(sidecar_path(&args.data)) {
            Ok(bytes) => Some(serde_json::from_slice(&bytes).context("reading corpus sidecar")?),
            Err(_) => None,
        };
        let src_lang = args
            .src_lang
            .clone()
            .or_else(|| sidecar.as_ref().map(|s| s.spec.src_lang.clone()))
            .unwrap_or_else(|| args.src_col.clone());
        let tgt_lang = args
            .tgt_lang
            .clone()
            .or_else(|| sidecar.as_ref().map(|s| s.spec.tgt_lang.clone()))
            .unwrap_or_else(|| args.tgt_col.clone());
        let loaded = load_csv(&args.data, &args.src_col, &args.tgt_col, &src_lang, &tgt_lang)
            .with_context(|| format!("loading {}", args.data.display()))?;
        if loaded.examples.len() < 2 {
            bail!(
                "{} holds {} usable pairs; at least 2 are needed",
                args.data.display(),
                loaded.examples.len()
            );
        }
        let (train, dev) = split(&loaded.examples, args.seed);
        Ok(Self { train, dev })
    }

    pub fn all(&self) -> Vec<ParallelExample> {
        self.train.iter().chain(&self.dev).cloned().collect()
    }

    /// Vocabulary over the training split's formatted text: both sides plus
    /// the prompt header.
    pub fn vocab(&self) -> Vocab {
        let header = prompt_template(&self.train[0].tgt_lang, "");
        Vocab::build(
            self.train
                .iter()
                .flat_map(|e| [e.src_text.as_str(), e.tgt_text.as_str()])
                .chain([header.as_str()]),
        )
    }
}

/// Position budget: a query plus up to five exemplar pairs, with room for the
/// prompt words around each.
pub fn model_seq_len(max_src: usize, max_tgt: usize) -> usize {
    (MAX_SHOTS + 1) * (max_src + max_tgt + 8)
}

pub fn train_config(data: &DataArgs, t: &TrainingArgs, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr: t.lr,
        warmup_ratio: t.warmup_ratio,
        grad_accum: t.grad_accum,
        micro_batch: t.micro_batch,
        epochs,
        label_smoothing: t.label_smoothing,
        max_src_len: data.max_src_len,
        max_tgt_len: data.max_tgt_len,
        seed: data.seed,
        lora: LoraConfig {
            rank: t.lora_rank,
            alpha: t.lora_alpha,
            dropout: t.lora_dropout,
            ..LoraConfig::default()
        },
        dev_eval_cap: t.dev_cap,
        eval_batch: t.eval_batch,
        ..TrainConfig::default()
    }
}

/// Fresh toy model, language-model pretrained on the training sentences of
/// both languages. Returns the snapshot and the first/last pretraining losses.
pub fn pretrained_base(
    corpus: &Corpus,
    vocab: &Vocab,
    data: &DataArgs,
    t: &TrainingArgs,
) -> Result<(Checkpoint, Option<(f64, f64)>)> {
    let cfg = ModelConfig {
        n_layers: t.n_layers,
        ..ModelConfig::toy(
            vocab.len(),
            model_seq_len(data.max_src_len, data.max_tgt_len),
            data.seed,
        )
    };
    let mut model = Model::new(cfg)?;
    let mut losses = None;
    if t.pretrain_steps > 0 {
        let sentences: Vec<String> = corpus
            .train
            .iter()
            .flat_map(|e| [e.src_text.clone(), e.tgt_text.clone()])
            .collect();
        let pcfg = PretrainConfig {
            steps: t.pretrain_steps,
            lr: t.pretrain_lr,
            batch: t.pretrain_batch,
            max_len: data.max_src_len.max(data.max_tgt_len) + 2,
            seed: data.seed,
        };
        let l = pretrain_base(&mut model, vocab, &sentences, &pcfg)?;
        losses = Some((l[0], l[l.len() - 1]));
    }
    let mut ckpt = Checkpoint::from_model(&model, 0);
    ckpt.vocabulary = Some(vocab.tokens().to_vec());
    ckpt.src_lang = Some(corpus.train[0].src_lang.clone());
    ckpt.tgt_lang = Some(corpus.train[0].tgt_lang.clone());
    Ok((ckpt, losses))
}

pub fn default_layer(n_layers: usize) -> usize {
    n_layers.div_ceil(2)
}

pub const PAPER_LAYERS: [usize; 10] = [1, 2, 5, 10, 15, 20, 25, 30, 31, 32];
pub const PAPER_DEPTH: usize = 32;
pub const PAPER_REPINA_LAYER: usize = 15;

/// Maps a layer of the 32-block reference model onto `n_layers` blocks by
/// fractional depth.
pub fn map_paper_layer(layer: usize, n_layers: usize) -> usize {
    let scaled = (layer * n_layers) as f64 / PAPER_DEPTH as f64;
    (scaled.round() as usize).clamp(1, n_layers)
}

/// Human-readable run log with one timestamped line per event.
pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(out_dir: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ");
        let path = out_dir.join(format!("{command}-{stamp}.log"));
        let out = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
        Ok(Self { path, out })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn info(&mut self, msg: impl AsRef<str>) -> Result<()> {
        log::info!("{}", msg.as_ref());
        self.write("INFO", msg.as_ref())
    }

    pub fn warn(&mut self, msg: impl AsRef<str>) -> Result<()> {
        log::warn!("{}", msg.as_ref());
        self.write("WARN", msg.as_ref())
    }

    fn write(&mut self, level: &str, msg: &str) -> Result<()> {
        writeln!(self.out, "{} {level} {msg}", treplina::train::timestamp())?;
        self.out.flush()?;
        Ok(())
    }
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
