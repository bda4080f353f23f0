use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LoraConfig, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "treplina-ckpt-1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Self-describing JSON snapshot of a model plus what is needed to run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: ModelConfig,
    pub lora: Option<LoraConfig>,
    pub adapters_enabled: bool,
    pub step: u64,
    pub tensors: BTreeMap<String, StoredTensor>,
    /// Token strings by id, when the checkpoint came from a training run.
    #[serde(default)]
    pub vocabulary: Option<Vec<String>>,
    #[serde(default)]
    pub src_lang: Option<String>,
    #[serde(default)]
    pub tgt_lang: Option<String>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, step: u64) -> Self {
        let tensors = model
            .named_parameters()
            .into_iter()
            .map(|(name, t)| {
                let stored = StoredTensor {
                    shape: t.shape().to_vec(),
                    data: t.to_vec(),
                };
                (name, stored)
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config: model.config().clone(),
            lora: model.lora_config().cloned(),
            adapters_enabled: model.adapters_enabled(),
            step,
            tensors,
            vocabulary: None,
            src_lang: None,
            tgt_lang: None,
        }
    }

    /// Rebuilds the model: fresh init from the config, adapters re-attached,
    /// then every stored tensor copied in by name.
    pub fn into_model(&self) -> Result<Model> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint format `{}`",
                self.format
            )));
        }
        let mut model = Model::new(self.config.clone())?;
        if let Some(lora) = &self.lora {
            model.attach_lora(lora)?;
        }
        let params = model.named_parameters();
        if params.len() != self.tensors.len() {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, t) in params {
            let stored = self
                .tensors
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint is missing tensor `{name}`")))?;
            if stored.shape != t.shape() || stored.data.len() != t.numel() {
                return Err(Error::shape("checkpoint", &stored.shape, t.shape()));
            }
            t.update_data(|d| d.copy_from_slice(&stored.data));
        }
        if model.lora_config().is_some() {
            model.set_adapters_enabled(self.adapters_enabled)?;
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

impl Model {
    pub fn load_parameters_from(&self, other: &Model) -> Result<()> {
        let theirs: BTreeMap<String, Tensor> = other.named_parameters().into_iter().collect();
        for (name, t) in self.named_parameters() {
            let src = theirs
                .get(&name)
                .ok_or_else(|| Error::Invalid(format!("missing parameter `{name}`")))?;
            if src.shape() != t.shape() {
                return Err(Error::shape("load_parameters", src.shape(), t.shape()));
            }
            let data = src.to_vec();
            t.update_data(|d| d.copy_from_slice(&data));
        }
        Ok(())
    }
}
