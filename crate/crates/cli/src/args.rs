use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use treplina::data::ReorderRule;

#[derive(Parser, Debug, Clone)]
#[command(
    name = "treplina",
    version,
    about = "Layer-wise cross-lingual alignment lab for a toy decoder-only translator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Generate a synthetic parallel corpus (CSV plus a `.spec.json` sidecar)
    GenData(GenDataArgs),
    /// Layer sweep: NoAlign, REPINA-only, and CKA-only/TRepLiNa at every layer
    Sweep(SweepArgs),
    /// Multi-epoch training at one layer with per-epoch dev evaluation
    Train(TrainArgs),
    /// Score a checkpoint on a corpus
    Eval(EvalArgs),
}

#[derive(Args, Debug, Clone)]
pub struct GenDataArgs {
    /// Output CSV path; the sidecar is written next to it as `<out>.spec.json`
    #[arg(long)]
    pub out: PathBuf,

    /// Number of sentence pairs
    #[arg(long, default_value_t = 1000)]
    pub n: usize,

    /// Distinct pivot-language words
    #[arg(long, default_value_t = 30)]
    pub base_vocab: usize,

    /// Seed of the word-substitution cipher; omit for the identity cipher
    #[arg(long)]
    pub cipher_seed: Option<u64>,

    /// Word-order rule: identity, reverse, swap-adjacent or rotate-K
    #[arg(long, default_value = "reverse")]
    pub rule: ReorderRule,

    /// Synthetic-language tokens emitted per pivot word
    #[arg(long, default_value_t = 1)]
    pub fertility: usize,

    /// Shortest pivot sentence, in words
    #[arg(long, default_value_t = 3)]
    pub min_len: usize,

    /// Longest pivot sentence, in words
    #[arg(long, default_value_t = 6)]
    pub max_len: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value = "Synthetic")]
    pub src_lang: String,

    #[arg(long, default_value = "Pivot")]
    pub tgt_lang: String,

    #[arg(long, default_value = "src")]
    pub src_col: String,

    #[arg(long, default_value = "tgt")]
    pub tgt_col: String,
}

/// Where the parallel data comes from and how it is read.
#[derive(Args, Debug, Clone)]
pub struct DataArgs {
    /// Parallel CSV with a header row
    #[arg(long)]
    pub data: PathBuf,

    /// Column holding the low-resource side
    #[arg(long, default_value = "src")]
    pub src_col: String,

    /// Column holding the pivot side
    #[arg(long, default_value = "tgt")]
    pub tgt_col: String,

    /// Source language name; defaults to the sidecar's, else the column name
    #[arg(long)]
    pub src_lang: Option<String>,

    /// Target language name used in the prompt; defaults to the sidecar's, else the column name
    #[arg(long)]
    pub tgt_lang: Option<String>,

    /// Source tokens kept per example
    #[arg(long, default_value_t = 256)]
    pub max_src_len: usize,

    /// Target tokens kept per example, and the decoding budget
    #[arg(long, default_value_t = 256)]
    pub max_tgt_len: usize,

    /// Seeds the split, model init, pretraining, shuffling and dropout
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Model, base pretraining and optimizer settings shared by sweep and train.
#[derive(Args, Debug, Clone)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 2e-4)]
    pub lr: f64,

    #[arg(long, default_value_t = 0.05)]
    pub warmup_ratio: f64,

    /// Micro-batches per optimizer step
    #[arg(long, default_value_t = 16)]
    pub grad_accum: usize,

    #[arg(long, default_value_t = 1)]
    pub micro_batch: usize,

    #[arg(long, default_value_t = 0.1)]
    pub label_smoothing: f64,

    /// REPINA applies on optimizer steps divisible by this
    #[arg(long, default_value_t = 2)]
    pub repina_cadence: usize,

    #[arg(long, default_value_t = 4)]
    pub lora_rank: usize,

    #[arg(long, default_value_t = 8.0)]
    pub lora_alpha: f64,

    #[arg(long, default_value_t = 0.05)]
    pub lora_dropout: f64,

    /// Transformer blocks in the toy model
    #[arg(long, default_value_t = 4)]
    pub n_layers: usize,

    /// Full-parameter LM steps on the training sentences before adapters attach
    #[arg(long, default_value_t = 400)]
    pub pretrain_steps: usize,

    #[arg(long, default_value_t = 3e-3)]
    pub pretrain_lr: f64,

    #[arg(long, default_value_t = 16)]
    pub pretrain_batch: usize,

    /// Development pairs scored after each epoch
    #[arg(long, default_value_t = 500)]
    pub dev_cap: usize,

    /// Prompts decoded together during evaluation
    #[arg(long, default_value_t = 16)]
    pub eval_batch: usize,
}

#[derive(Args, Debug, Clone)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub training: TrainingArgs,

    /// Layers to sweep (1-based block outputs); defaults to every layer
    #[arg(long, value_delimiter = ',')]
    pub layers: Vec<usize>,

    /// Sweep the reference 32-block layer set {1,2,5,10,15,20,25,30,31,32}
    /// mapped by fractional depth: round(l * L / 32), clamped to [1, L],
    /// duplicates removed. The REPINA-only layer 15 maps the same way.
    #[arg(long, conflicts_with = "layers")]
    pub paper_layers: bool,

    /// Layer of the single REPINA-only run; defaults to ceil(L / 2)
    #[arg(long)]
    pub repina_layer: Option<usize>,

    /// CKA weight
    #[arg(long = "lambda", default_value_t = 0.05)]
    pub lambda: f64,

    /// REPINA weight
    #[arg(long = "mu", default_value_t = 0.05)]
    pub mu: f64,

    #[arg(long, default_value_t = 1)]
    pub epochs: usize,

    /// Runs trained concurrently, each on its own thread with its own model
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,

    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub training: TrainingArgs,

    /// Alignment layer; defaults to ceil(L / 2)
    #[arg(long)]
    pub layer: Option<usize>,

    /// CKA weight
    #[arg(long = "lambda", default_value_t = 0.01)]
    pub lambda: f64,

    /// REPINA weight
    #[arg(long = "mu", default_value_t = 0.05)]
    pub mu: f64,

    #[arg(long, default_value_t = 5)]
    pub epochs: usize,

    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The checkpoint as trained, adapters on
    Trained,
    /// Bare prompt with adapters off
    ZeroShot,
    /// First k training pairs as exemplars, adapters off
    FewShot,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Dev,
    All,
}

#[derive(Args, Debug, Clone)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[arg(long)]
    pub checkpoint: PathBuf,

    #[arg(long, value_enum, default_value = "trained")]
    pub mode: EvalMode,

    /// Exemplars for few-shot prompting (1, 3 or 5 in the reference protocol)
    #[arg(long, default_value_t = 1)]
    pub k: usize,

    /// Which part of the corpus to score (split by --seed)
    #[arg(long, value_enum, default_value = "dev")]
    pub split: SplitChoice,

    #[arg(long, default_value_t = 16)]
    pub eval_batch: usize,

    #[arg(long)]
    pub out_dir: PathBuf,
}
