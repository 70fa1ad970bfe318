//! Run configuration: every stage's knobs with their defaults, as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{EvalConfig, LabelMode, DEFAULT_BANK_SIZE};
use crate::tasks::{LabelConfig, PairConfig};
use crate::trainer::TrainConfig;

/// Which features the memory bank and evaluation queries use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureMode {
    Raw,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BankSection {
    pub size: usize,
    pub data_fraction: f64,
    pub mode: LabelMode,
    pub features: FeatureMode,
}

impl Default for BankSection {
    fn default() -> Self {
        BankSection {
            size: DEFAULT_BANK_SIZE,
            data_fraction: 1.0,
            mode: LabelMode::Discrete,
            features: FeatureMode::Raw,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub k: usize,
    pub max_iters: usize,
    pub restarts: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_sample: Option<usize>,
}

impl Default for LabelSection {
    fn default() -> Self {
        let d = LabelConfig::default();
        LabelSection {
            k: d.k,
            max_iters: d.max_iters,
            restarts: d.restarts,
            cluster_sample: d.cluster_sample,
        }
    }
}

/// All stage configurations under one seed. Stage sections take their own
/// `seed` from the top-level value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub labels: LabelSection,
    pub pairs: PairConfig,
    pub train: TrainConfig,
    pub bank: BankSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            labels: LabelSection::default(),
            pairs: PairConfig::default(),
            train: TrainConfig::default(),
            bank: BankSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Parse {
            field: "config".into(),
            reason: e.message().to_string(),
        })?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
            field: e.path().to_string(),
            reason: e.inner().message().to_string(),
        })?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Sets the global seed and propagates it into the stage sections.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            k: self.labels.k,
            max_iters: self.labels.max_iters,
            restarts: self.labels.restarts,
            cluster_sample: self.labels.cluster_sample,
            seed: self.seed,
        }
    }

    pub fn bank_config(&self) -> crate::retrieval::BankConfig {
        crate::retrieval::BankConfig {
            target_size: self.bank.size,
            mode: self.bank.mode,
            data_fraction: self.bank.data_fraction,
            seed: self.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.train.tau, 0.07);
        assert_eq!(c.train.support_size, 8);
        assert_eq!(c.train.epochs, 5);
        assert_eq!(c.train.lr, 2.25e-7);
        assert_eq!(c.train.weight_decay, 0.05);
        assert_eq!(c.eval.k, 30);
        assert_eq!(c.eval.tau, 0.07);
        assert_eq!(c.bank.size, 10_240_000);
        assert_eq!(c.labels.k, 1000);
        assert_eq!(c.pairs.top_n, 5);
        assert_eq!(c.pairs.area_thresh, 0.05);
    }

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let c = RunConfig::default().with_seed(9);
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = RunConfig::from_toml("seed = 3\n[eval]\nk = 5\n").unwrap();
        assert_eq!(partial.eval.k, 5);
        assert_eq!(partial.train.seed, 3);
        assert_eq!(partial.train.epochs, 5);
    }

    #[test]
    fn unknown_field_names_its_path() {
        match RunConfig::from_toml("[train]\nepoch = 3\n") {
            Err(Error::Parse { field, .. }) => assert!(field.starts_with("train"), "{field}"),
            other => panic!("{other:?}"),
        }
    }
}
