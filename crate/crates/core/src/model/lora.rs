use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::INIT_STD;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Projection sites that can carry an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Site {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Site {
    pub const ALL: [Site; 7] = [Site::Q, Site::K, Site::V, Site::O, Site::Gate, Site::Up, Site::Down];

    pub fn name(self) -> &'static str {
        match self {
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
            Site::O => "o",
            Site::Gate => "gate",
            Site::Up => "up",
            Site::Down => "down",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown adapter site `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target_sites: Vec<String>,
}

impl Default for LoraConfig {
    /// Toy-scale defaults (rank 4, alpha 8) on all seven projections.
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: 8.0,
            dropout: 0.05,
            target_sites: Site::ALL.iter().map(|s| s.name().to_string()).collect(),
        }
    }
}

impl LoraConfig {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<Vec<Site>> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be positive".into()));
        }
        if !(self.alpha > 0.0 && self.scaling().is_finite()) {
            return Err(Error::Config("adapter alpha must be positive and finite".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        self.target_sites.iter().map(|s| s.parse()).collect()
    }
}

/// `delta(x) = scale · dropout(x) · A · B`, with `A: [in, r]`, `B: [r, out]`.
#[derive(Debug)]
pub(crate) struct Adapter {
    pub a: Tensor,
    pub b: Tensor,
    pub scale: f64,
    pub dropout: f64,
}

impl Adapter {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, cfg: &LoraConfig) -> Self {
        let dist = Normal::new(0.0, INIT_STD).expect("valid std");
        let a = (0..fan_in * cfg.rank).map(|_| dist.sample(rng)).collect();
        Self {
            a: Tensor::parameter(a, vec![fan_in, cfg.rank]).expect("shape"),
            b: Tensor::parameter(vec![0.0; cfg.rank * fan_out], vec![cfg.rank, fan_out]).expect("shape"),
            scale: cfg.scaling(),
            dropout: cfg.dropout,
        }
    }

    pub fn delta(&self, x: &Tensor, dropout_seed: Option<u64>) -> Result<Tensor> {
        let input = match dropout_seed {
            Some(seed) if self.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let keep = 1.0 - self.dropout;
                let mask: Vec<f64> = (0..x.numel())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                x.mask_mul(&mask)?
            }
            _ => x.clone(),
        };
        Ok(input.matmul(&self.a)?.matmul(&self.b)?.scale(self.scale))
    }
}
