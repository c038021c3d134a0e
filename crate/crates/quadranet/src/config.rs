//! JSON configuration. Every section is optional; unknown keys are rejected
//! with the JSON path of the offending key.
//!
//! ```json
//! {
//!   "network": { "base_channels": 8, "in_channels": 1, "num_classes": 4, "input_size": 32,
//!                "stages": [{"depth": 1, "block": {"kind": "quadra", "kernel": 7, "expansion": 4}}, ...] },
//!   "train":   { "lr": 0.004, "epochs": 30, "warmup_steps": 300, ... },
//!   "search":  { "budget": 2.0e6, "population": 16, "sample": 4, "generations": 30, "steps": 100 },
//!   "data":    { "kind": "interaction", "n": 2500, "size": 32, "classes": 4, "val_stride": 5 }
//! }
//! ```

use std::path::{Path, PathBuf};

use quadranet_core::blocks::BlockSpec;
use quadranet_core::costmodel::Coefficients;
use quadranet_core::data::{gen_interaction_images_with, InteractionParams, LabeledDataset};
use quadranet_core::nas::SearchConfig;
use quadranet_core::network::NetworkSpec;
use quadranet_core::train::OptimConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub network: Option<NetworkSpec>,
    pub train: OptimConfig,
    pub search: SearchSection,
    pub data: DataConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchSection {
    /// Proxy-latency budget; absent means unbounded.
    pub budget: Option<f64>,
    pub population: usize,
    pub sample: usize,
    pub generations: usize,
    pub seed: u64,
    /// Optimizer steps per fitness evaluation.
    pub steps: usize,
    /// Searchable slots per stage.
    pub slots: [usize; 4],
    pub coefficients: Coefficients,
}

impl Default for SearchSection {
    fn default() -> Self {
        let c = SearchConfig::default();
        Self {
            budget: None,
            population: c.population,
            sample: c.sample,
            generations: c.generations,
            seed: c.seed,
            steps: 100,
            slots: [1, 1, 1, 1],
            coefficients: Coefficients::default(),
        }
    }
}

impl SearchSection {
    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            population: self.population,
            sample: self.sample,
            generations: self.generations,
            seed: self.seed,
            ..SearchConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Interaction(InteractionData),
    Idx(IdxData),
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Interaction(InteractionData::default())
    }
}

/// Generated two-blob images; every `val_stride`-th sample is held out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InteractionData {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    pub seed: u64,
    pub val_stride: usize,
    pub noise: f64,
    pub min_amplitude: f64,
    pub max_amplitude: f64,
}

impl Default for InteractionData {
    fn default() -> Self {
        let p = InteractionParams::default();
        Self {
            n: 2500,
            size: 32,
            classes: 4,
            seed: 0,
            val_stride: 5,
            noise: p.noise,
            min_amplitude: p.min_amplitude,
            max_amplitude: p.max_amplitude,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxData {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub val_images: PathBuf,
    pub val_labels: PathBuf,
    #[serde(default)]
    pub num_classes: Option<usize>,
}

impl DataConfig {
    /// `(train, val)`; relative IDX paths resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
        match self {
            DataConfig::Interaction(d) => {
                let params = InteractionParams {
                    noise: d.noise,
                    min_amplitude: d.min_amplitude,
                    max_amplitude: d.max_amplitude,
                };
                let all = gen_interaction_images_with(d.n, d.size, d.classes, d.seed, params)?;
                Ok(all.split_by_stride(d.val_stride)?)
            }
            DataConfig::Idx(d) => {
                let p = |q: &PathBuf| base_dir.join(q);
                let train = crate::idx::read_idx(&p(&d.train_images), &p(&d.train_labels), d.num_classes)?;
                let mut val = crate::idx::read_idx(&p(&d.val_images), &p(&d.val_labels), Some(train.num_classes))?;
                val.split = quadranet_core::data::Split::Val;
                Ok((train, val))
            }
        }
    }
}

/// Network used by `train` when the config has none: one quadratic block per stage.
pub fn default_network(in_channels: usize, num_classes: usize, input_size: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels,
        ..NetworkSpec::uniform(8, [1, 1, 1, 1], BlockSpec::quadra(7, 4), num_classes, input_size)
    }
}

/// Deserializes JSON, reporting the path of the first offending key.
pub fn parse_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    let mut de = serde_json::Deserializer::from_str(text);
    let value: T = serde_path_to_error::deserialize(&mut de).map_err(|e| AppError::Config {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;
    de.end().map_err(|e| AppError::Config {
        path: String::from("."),
        message: e.to_string(),
    })?;
    Ok(value)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    parse_json(&std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?)
}
