#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use treplina::data::{gen_corpus, ParallelExample, ReorderRule, SyntheticLangSpec, Vocab};
use treplina::model::{LoraConfig, Model, ModelConfig};
use treplina::train::TrainConfig;

pub fn corpus(n: usize, seed: u64) -> (Vocab, Vec<ParallelExample>) {
    let spec = SyntheticLangSpec::new(12, Some(7), ReorderRule::Reverse, 2);
    let ex = gen_corpus(&spec, n, 2..=4, seed).unwrap();
    (vocab_for(&ex), ex)
}

pub fn vocab_for(ex: &[ParallelExample]) -> Vocab {
    let header = format!("Translate to {}:", ex[0].tgt_lang);
    Vocab::build(
        ex.iter()
            .flat_map(|e| [e.src_text.as_str(), e.tgt_text.as_str()])
            .chain([header.as_str()]),
    )
}

pub fn small_model(vocab: &Vocab, layers: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_layers: layers,
        n_heads: 2,
        d_ff: 24,
        max_seq_len: 48,
        seed,
    };
    Model::new(cfg).unwrap()
}

pub fn lora(dropout: f64) -> LoraConfig {
    LoraConfig {
        dropout,
        ..LoraConfig::default()
    }
}

/// Gives every adapter `B` matrix nonzero values so adapters change the output.
pub fn randomize_adapters(model: &Model, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in model.adapter_parameters() {
        if name.ends_with("lora_b") {
            t.update_data(|d| {
                d.iter_mut()
                    .for_each(|v| *v = scale * rng.sample::<f64, _>(StandardNormal))
            });
        }
    }
}

pub fn quick_train_config() -> TrainConfig {
    TrainConfig {
        lr: 1e-2,
        grad_accum: 2,
        micro_batch: 2,
        epochs: 2,
        max_src_len: 16,
        max_tgt_len: 8,
        lora: lora(0.05),
        seed: 5,
        ..TrainConfig::default()
    }
}
