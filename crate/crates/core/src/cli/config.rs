//! Optional TOML configuration; command-line flags take precedence.
//!
//! ```toml
//! manifest = "data/manifest.json"
//! output_dir = "runs/a"
//! window = 64
//! stride = 32
//!
//! [partition]
//! required = ["walk", "jog"]
//! sensitive = ["stairs"]
//! neutral = ["sit"]
//!
//! [train]
//! epochs = 30
//! batch_size = 32
//! dropout_rate = 0.0
//! l2_lambda = 0.0
//! learning_rate = 0.001
//! seed = 3
//!
//! [rae]
//! layers = [96, 24, 12, 24, 96, 192]
//!
//! [aae]
//! weights = [1.0, 1.0, 1.0]
//! rounds = 30
//! warmup_epochs = 10
//! aae_steps_per_round = 5
//! adversary_steps_per_round = 1
//! pretrain_epochs = 2
//! eval_every = 5
//! probe_epochs = 10
//! encoder_hidden = [128, 64]
//! latent_dim = 32
//! regularizer_params = 50000
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::NamedPartition;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Replaces the manifest's partition.
    pub partition: Option<NamedPartition>,
    pub window: Option<usize>,
    pub stride: Option<usize>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub rae: RaeSection,
    #[serde(default)]
    pub aae: AaeSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub l2_lambda: Option<f64>,
    pub learning_rate: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RaeSection {
    pub layers: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AaeSection {
    /// `[beta_i, beta_a, beta_d]`.
    pub weights: Option<[f64; 3]>,
    pub rounds: Option<usize>,
    pub warmup_epochs: Option<usize>,
    pub aae_steps_per_round: Option<usize>,
    pub adversary_steps_per_round: Option<usize>,
    pub pretrain_epochs: Option<usize>,
    pub eval_every: Option<usize>,
    pub probe_epochs: Option<usize>,
    pub encoder_hidden: Option<Vec<usize>>,
    pub latent_dim: Option<usize>,
    pub regularizer_params: Option<usize>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let doc: String = include_str!("config.rs")
            .lines()
            .skip_while(|l| !l.starts_with("//! ```toml"))
            .skip(1)
            .take_while(|l| !l.starts_with("//! ```"))
            .map(|l| l.trim_start_matches("//!").trim_start())
            .collect::<Vec<_>>()
            .join("\n");
        let c = PipelineConfig::from_toml(&doc).unwrap();
        assert_eq!(c.train.batch_size, Some(32));
        assert_eq!(c.aae.weights, Some([1.0, 1.0, 1.0]));
        assert_eq!(c.partition.unwrap().sensitive, ["stairs"]);
    }

    #[test]
    fn unknown_key_is_config_error() {
        let err = PipelineConfig::from_toml("[train]\nepoch = 3\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("epoch")), "{err}");
        assert_eq!(PipelineConfig::from_toml("").unwrap(), PipelineConfig::default());
    }
}
