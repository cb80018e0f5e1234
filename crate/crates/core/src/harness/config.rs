use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BenchmarkSpec, Dataset};
use crate::error::{Error, Result};
use crate::hyda::{ModelConfig, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    LeaveOneOut,
    LossAblation,
    LayerAblation,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::LeaveOneOut => "leave_one_out",
            Mode::LossAblation => "loss_ablation",
            Mode::LayerAblation => "layer_ablation",
        }
    }
}

/// Everything a run needs besides the dataset bytes. Read from TOML; every
/// field has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Dataset directory holding `manifest.json`.
    pub dataset: PathBuf,
    /// Used to create the dataset when `dataset` has no manifest yet.
    pub benchmark: BenchmarkSpec,
    pub seeds: Vec<u64>,
    /// Held-out domain ids for leave-one-out style modes.
    pub targets: Vec<usize>,
    pub pretrain_epochs: usize,
    /// `source_domains` is filled per run and ignored here.
    pub model: ModelConfig,
    /// `seed` is replaced by each entry of `seeds`.
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            mode: Mode::LeaveOneOut,
            dataset: PathBuf::from("data/benchmark"),
            benchmark: BenchmarkSpec::default(),
            seeds: vec![17, 42, 1337],
            targets: vec![1, 2, 3],
            pretrain_epochs: 30,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config { fields: vec![e.message().to_string()] })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Checks the config against `ds`, listing every failing field.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        let mut bad = Vec::new();
        if self.seeds.is_empty() {
            bad.push("seeds: must be non-empty".to_string());
        }
        if self.train.epochs == 0 {
            bad.push("train.epochs: must be >= 1".into());
        }
        if self.train.batch_size < 2 {
            bad.push("train.batch_size: must be >= 2".into());
        }
        let ids = ds.manifest.domain_ids();
        if self.mode != Mode::Supervised && self.targets.is_empty() {
            bad.push(format!("targets: {} needs at least one held-out domain", self.mode.as_str()));
        }
        for t in &self.targets {
            if !ids.contains(t) {
                bad.push(format!("targets: unknown domain {t} (dataset has {ids:?})"));
            }
        }
        if self.mode != Mode::Supervised && ids.len() < 3 {
            bad.push(format!("dataset: {} needs >= 3 domains", self.mode.as_str()));
        }
        if self.model.input_dim != ds.d() {
            bad.push(format!("model.input_dim: {} does not match dataset width {}", self.model.input_dim, ds.d()));
        }
        if self.mode == Mode::LayerAblation && self.model.head_len() != 4 {
            bad.push(format!("model.head_widths: layer ablation needs a 4-layer head, got {}", self.model.head_len()));
        }
        let mut probe = self.model.clone();
        probe.source_domains = vec![0, 1];
        if let Err(Error::Config { fields }) = probe.validate() {
            bad.extend(fields.into_iter().map(|f| format!("model: {f}")));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { fields: bad })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_benchmark;

    fn small_ds() -> Dataset {
        generate_benchmark(&BenchmarkSpec { samples_per_domain: 10, ..BenchmarkSpec::default() }).unwrap()
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("mode = \"layer_ablation\"\nseeds = [1]\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.mode, Mode::LayerAblation);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        assert!(matches!(ExperimentConfig::from_toml("sedes = [1]"), Err(Error::Config { .. })));
    }

    #[test]
    fn validation_lists_all_failures() {
        let cfg = ExperimentConfig { seeds: vec![], targets: vec![9], ..ExperimentConfig::default() };
        match cfg.validate(&small_ds()) {
            Err(Error::Config { fields }) => {
                assert_eq!(fields.len(), 2, "{fields:?}");
                assert!(fields[0].starts_with("seeds"));
                assert!(fields[1].contains("unknown domain 9"));
            }
            other => panic!("{other:?}"),
        }
        assert!(ExperimentConfig::default().validate(&small_ds()).is_ok());
    }
}
