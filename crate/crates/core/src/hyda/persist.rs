use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{HydaModel, ModelConfig};
use crate::error::{Error, Result};
use crate::losses::{LossWeights, TaskKind};
use crate::nn::checkpoint::{load_params, restore_into, save_params};
use crate::nn::Module;

pub const ARCHITECTURE_FILE: &str = "architecture.json";

/// Architecture descriptor stored next to the parameter checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub config: ModelConfig,
    pub primary_encoder_sizes: Vec<usize>,
    pub primary_head_sizes: Vec<usize>,
    pub external_mask: Vec<bool>,
    pub embedding_dim: usize,
    pub hyper_hidden: usize,
    pub num_domains: usize,
    pub task_kind: TaskKind,
    pub loss_weights: LossWeights,
}

impl Architecture {
    pub fn of(model: &HydaModel) -> Self {
        let c = &model.config;
        Architecture {
            config: c.clone(),
            primary_encoder_sizes: c.encoder_sizes(),
            primary_head_sizes: c.head_sizes(),
            external_mask: c.external_mask(),
            embedding_dim: c.embedding_dim,
            hyper_hidden: c.hyper_hidden,
            num_domains: c.source_domains.len(),
            task_kind: c.task_kind,
            loss_weights: c.loss_weights,
        }
    }
}

pub fn save_model(dir: &Path, model: &HydaModel) -> Result<()> {
    save_params(dir, &model.named_params())?;
    let path = dir.join(ARCHITECTURE_FILE);
    let json = serde_json::to_string_pretty(&Architecture::of(model)).expect("architecture serialises");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_model(dir: &Path) -> Result<HydaModel> {
    let path = dir.join(ARCHITECTURE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let arch: Architecture = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut model = HydaModel::new(arch.config, 0)?;
    let loaded = load_params(dir)?;
    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    if loaded.len() != names.len() {
        return Err(Error::format(dir, format!("checkpoint has {} tensors, model {}", loaded.len(), names.len())));
    }
    restore_into(&loaded, &names, model.params_mut())?;
    Ok(model)
}
