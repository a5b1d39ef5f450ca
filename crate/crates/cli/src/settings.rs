//! Layering of config file, `--set` overrides and convenience flags into the
//! typed model/train/data configurations.

use std::path::Path;

use minformer::config::KeyValues;
use minformer::data::{DataConfig, Source, DATA_KEYS};
use minformer::encoder::{ModelConfig, MODEL_KEYS};
use minformer::train::{Precision, TrainConfig, TRAIN_KEYS};
use minformer::{Error, Result};

pub fn schema() -> Vec<&'static str> {
    MODEL_KEYS.iter().chain(&TRAIN_KEYS).chain(&DATA_KEYS).copied().collect()
}

/// Flags that override config keys, applied after the file in this order:
/// `--set` assignments (left to right), then `--seed`, `--deterministic`,
/// `--precision`.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub deterministic: bool,
    pub precision: Option<Precision>,
}

impl Overrides {
    pub fn apply(&self, kv: &mut KeyValues) -> Result<()> {
        let schema = schema();
        for s in &self.sets {
            kv.apply_override(s, &schema)?;
        }
        if let Some(seed) = self.seed {
            for key in ["model.seed", "train.seed", "data.seed"] {
                kv.set(key, &seed.to_string());
            }
        }
        if self.deterministic {
            kv.set("train.deterministic", "true");
        }
        if let Some(p) = self.precision {
            kv.set("train.precision", &p.to_string());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Settings {
    /// Builds typed settings. Model defaults come from the CIFAR-10 preset
    /// when `data.dataset = cifar10`, otherwise from the MNIST preset.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let unknown = kv.unknown_keys(&schema());
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let data = DataConfig::from_kv(kv, DataConfig::default())?;
        let base = match data.source {
            Source::Cifar10 => ModelConfig::cifar10(),
            _ => ModelConfig::mnist(),
        };
        Ok(Settings {
            model: ModelConfig::from_kv(kv, base)?,
            train: TrainConfig::from_kv(kv, TrainConfig::default())?,
            data,
        })
    }

    /// Reads an optional config file and layers the overrides on top.
    pub fn load(config: Option<&Path>, overrides: &Overrides) -> Result<(Self, KeyValues)> {
        let mut kv = match config {
            Some(path) => KeyValues::read(path)?,
            None => KeyValues::new(),
        };
        overrides.apply(&mut kv)?;
        Ok((Self::from_kv(&kv)?, kv))
    }

    /// Every setting, defaults included, as canonical `key = value` text.
    pub fn resolved(&self) -> KeyValues {
        let mut kv = self.model.to_kv();
        kv.extend(&self.train.to_kv());
        kv.extend(&self.data.to_kv());
        kv
    }

    /// Training-set size `K` assumed by `count` when no data is loaded.
    pub fn nominal_examples(&self) -> (usize, String) {
        match self.data.source {
            _ if self.data.train_size > 0 => (self.data.train_size, "data.train_size".into()),
            Source::Cifar10 => (50_000, "CIFAR-10 train split".into()),
            Source::Mnist | Source::MnistSample => (60_000, "MNIST train split".into()),
            Source::Synthetic => (
                self.model.classes * self.data.per_class,
                "synthetic classes × per_class".into(),
            ),
        }
    }
}
