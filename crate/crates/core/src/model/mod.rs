//! Toy decoder-only transformer with hidden-state taps and low-rank adapters.
//!
//! Blocks are pre-norm (RMS normalization), use causal multi-head attention and a
//! gated feed-forward (`down(silu(gate(x)) * up(x))`). Token and learned absolute
//! position embeddings are summed; position ids count real tokens only, so the
//! same sequence yields the same activations under left or right padding.

mod checkpoint;
mod lora;

pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT};
pub use lora::{LoraConfig, Site};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};
use lora::Adapter;

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: four blocks of width 32.
    pub fn toy(vocab_size: usize, max_seq_len: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            d_model: 32,
            n_layers: 4,
            n_heads: 4,
            d_ff: 64,
            max_seq_len,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Dropout applies to adapter inputs only, and only when a seed is supplied.
#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    pub collect_hidden: bool,
    /// Run blocks `1..=l` only and skip the head.
    pub stop_after_layer: Option<usize>,
    pub dropout_seed: Option<u64>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        Self::default()
    }

    pub fn hidden_up_to(layer: usize) -> Self {
        Self {
            collect_hidden: true,
            stop_after_layer: Some(layer),
            dropout_seed: None,
        }
    }

    pub fn with_dropout(mut self, seed: Option<u64>) -> Self {
        self.dropout_seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, seq, vocab]`; absent when the pass stopped early.
    pub logits: Option<Tensor>,
    /// `hidden[0]` is the embedding output, `hidden[l]` the output of block `l`,
    /// each `[batch, seq, d_model]`. Padded rows are not zeroed.
    pub hidden: Vec<Tensor>,
    pub batch: usize,
    pub seq: usize,
}

impl ForwardOutput {
    pub fn logits(&self) -> Result<&Tensor> {
        self.logits
            .as_ref()
            .ok_or_else(|| Error::Invalid("forward pass stopped before the output head".into()))
    }
}

#[derive(Debug)]
pub(crate) struct Linear {
    pub weight: Tensor,
    pub adapter: Option<Adapter>,
}

impl Linear {
    fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: normal_param(rng, vec![fan_in, fan_out]),
            adapter: None,
        }
    }

    fn forward(&self, x: &Tensor, adapters_on: bool, dropout_seed: Option<u64>) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match (&self.adapter, adapters_on) {
            (Some(ad), true) => y.add(&ad.delta(x, dropout_seed)?),
            _ => Ok(y),
        }
    }

    fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug)]
pub(crate) struct Block {
    pub attn_norm: Tensor,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ffn_norm: Tensor,
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

impl Block {
    pub(crate) fn site(&self, site: Site) -> &Linear {
        match site {
            Site::Q => &self.q,
            Site::K => &self.k,
            Site::V => &self.v,
            Site::O => &self.o,
            Site::Gate => &self.gate,
            Site::Up => &self.up,
            Site::Down => &self.down,
        }
    }

    pub(crate) fn site_mut(&mut self, site: Site) -> &mut Linear {
        match site {
            Site::Q => &mut self.q,
            Site::K => &mut self.k,
            Site::V => &mut self.v,
            Site::O => &mut self.o,
            Site::Gate => &mut self.gate,
            Site::Up => &mut self.up,
            Site::Down => &mut self.down,
        }
    }
}

#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    blocks: Vec<Block>,
    final_norm: Tensor,
    head: Tensor,
    lora: Option<LoraConfig>,
    adapters_enabled: bool,
}

fn normal_param(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::parameter(data, shape).expect("shape matches data")
}

fn ones_param(n: usize) -> Tensor {
    Tensor::parameter(vec![1.0; n], vec![n]).expect("shape matches data")
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let tok_emb = normal_param(&mut rng, vec![v, d]);
        let pos_emb = normal_param(&mut rng, vec![config.max_seq_len, d]);
        let blocks = (0..config.n_layers)
            .map(|_| Block {
                attn_norm: ones_param(d),
                q: Linear::new(&mut rng, d, d),
                k: Linear::new(&mut rng, d, d),
                v: Linear::new(&mut rng, d, d),
                o: Linear::new(&mut rng, d, d),
                ffn_norm: ones_param(d),
                gate: Linear::new(&mut rng, d, f),
                up: Linear::new(&mut rng, d, f),
                down: Linear::new(&mut rng, f, d),
            })
            .collect();
        let final_norm = ones_param(d);
        let head = normal_param(&mut rng, vec![d, v]);
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
            lora: None,
            adapters_enabled: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn adapters_enabled(&self) -> bool {
        self.lora.is_some() && self.adapters_enabled
    }

    /// Wraps every targeted projection as `W + (alpha/r)·A·B` with `B = 0`
    /// and freezes all base weights.
    pub fn attach_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::Config("adapters are already attached".into()));
        }
        let sites = cfg.validate()?;
        for (_, p) in self.base_parameters() {
            p.set_requires_grad(false);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::mix_seed(self.config.seed, 0x4c6f5241));
        for block in &mut self.blocks {
            for &site in Site::ALL.iter().filter(|s| sites.contains(s)) {
                let lin = block.site_mut(site);
                lin.adapter = Some(Adapter::new(&mut rng, lin.fan_in(), lin.fan_out(), cfg));
            }
        }
        self.lora = Some(cfg.clone());
        self.adapters_enabled = true;
        Ok(())
    }

    pub fn set_adapters_enabled(&mut self, on: bool) -> Result<()> {
        if self.lora.is_none() {
            return Err(Error::Config("no adapters attached".into()));
        }
        self.adapters_enabled = on;
        Ok(())
    }

    /// Embeddings, norms, projections and head, in a fixed order.
    pub fn base_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{l}.attn_norm"), b.attn_norm.clone()));
            out.push((format!("blocks.{l}.ffn_norm"), b.ffn_norm.clone()));
            for site in Site::ALL {
                out.push((
                    format!("blocks.{l}.{}.weight", site.name()),
                    b.site(site).weight.clone(),
                ));
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out.push(("head".to_string(), self.head.clone()));
        out
    }

    pub fn adapter_parameters(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            for site in Site::ALL {
                if let Some(ad) = &b.site(site).adapter {
                    out.push((format!("blocks.{l}.{}.lora_a", site.name()), ad.a.clone()));
                    out.push((format!("blocks.{l}.{}.lora_b", site.name()), ad.b.clone()));
                }
            }
        }
        out
    }

    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut all = self.base_parameters();
        all.extend(self.adapter_parameters());
        all
    }

    pub fn trainable_parameters(&self) -> Vec<Tensor> {
        self.named_parameters()
            .into_iter()
            .map(|(_, t)| t)
            .filter(Tensor::requires_grad)
            .collect()
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.trainable_parameters().iter().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        for (_, p) in self.named_parameters() {
            p.zero_grad();
        }
    }

    /// Independent copy; no tensor storage is shared with `self`.
    pub fn deep_clone(&self) -> Model {
        Checkpoint::from_model(self, 0)
            .into_model()
            .expect("round trip of a valid model")
    }

    /// Runs the network on a rectangular batch of token ids.
    pub fn forward(&self, ids: &[Vec<u32>], mask: &[Vec<bool>], opts: &ForwardOptions) -> Result<ForwardOutput> {
        let batch = ids.len();
        let seq = ids.first().map_or(0, Vec::len);
        if batch == 0 || seq == 0 {
            return Err(Error::Invalid("empty batch".into()));
        }
        if mask.len() != batch || ids.iter().any(|r| r.len() != seq) || mask.iter().any(|r| r.len() != seq) {
            return Err(Error::Invalid(
                "token ids and attention mask must be rectangular and aligned".into(),
            ));
        }
        if seq > self.config.max_seq_len {
            return Err(Error::Invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(row) = mask.iter().position(|r| !r.iter().any(|&m| m)) {
            return Err(Error::Invalid(format!("batch row {row} is fully masked")));
        }
        let flat_ids: Vec<usize> = ids.iter().flatten().map(|&i| i as usize).collect();
        if let Some(bad) = flat_ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(Error::Invalid(format!(
                "token id {bad} out of range for vocab {}",
                self.config.vocab_size
            )));
        }
        let key_mask: Vec<bool> = mask.iter().flatten().copied().collect();
        let positions: Vec<usize> = mask
            .iter()
            .flat_map(|row| {
                let mut count = 0usize;
                row.iter().map(move |&m| {
                    count += m as usize;
                    count.saturating_sub(1)
                })
            })
            .collect();
        let stop = match opts.stop_after_layer {
            Some(l) if l > self.config.n_layers => {
                return Err(Error::Invalid(format!(
                    "layer {l} exceeds depth {}",
                    self.config.n_layers
                )));
            }
            Some(l) => l,
            None => self.config.n_layers,
        };

        let d = self.config.d_model;
        let to_3d = |t: &Tensor| t.reshape(&[batch, seq, d]);
        let on = self.adapters_enabled();
        let mut x = self
            .tok_emb
            .gather_rows(&flat_ids)?
            .add(&self.pos_emb.gather_rows(&positions)?)?;
        let mut hidden = Vec::with_capacity(stop + 1);
        if opts.collect_hidden {
            hidden.push(to_3d(&x)?);
        }
        for (l, b) in self.blocks.iter().take(stop).enumerate() {
            let site_seed = |site: Site| {
                opts.dropout_seed
                    .map(|s| crate::data::mix_seed(s, (l * 8 + site as usize) as u64))
            };
            let h = x.rms_norm(&b.attn_norm, NORM_EPS)?;
            let q = b.q.forward(&h, on, site_seed(Site::Q))?;
            let k = b.k.forward(&h, on, site_seed(Site::K))?;
            let v = b.v.forward(&h, on, site_seed(Site::V))?;
            let a = Tensor::causal_attention(&q, &k, &v, batch, seq, self.config.n_heads, &key_mask)?;
            x = x.add(&b.o.forward(&a, on, site_seed(Site::O))?)?;
            let h = x.rms_norm(&b.ffn_norm, NORM_EPS)?;
            let g = b.gate.forward(&h, on, site_seed(Site::Gate))?.silu();
            let u = b.up.forward(&h, on, site_seed(Site::Up))?;
            x = x.add(&b.down.forward(&g.mul(&u)?, on, site_seed(Site::Down))?)?;
            if opts.collect_hidden {
                hidden.push(to_3d(&x)?);
            }
        }
        let logits = if opts.stop_after_layer.is_some() {
            None
        } else {
            let z = x.rms_norm(&self.final_norm, NORM_EPS)?.matmul(&self.head)?;
            Some(z.reshape(&[batch, seq, self.config.vocab_size])?)
        };
        Ok(ForwardOutput {
            logits,
            hidden,
            batch,
            seq,
        })
    }

    #[cfg(test)]
    pub(crate) fn blocks(&self) -> &[Block] {
        &self.blocks
    }
}
