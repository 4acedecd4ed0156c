//! Layered run configuration: built-in defaults, then a TOML file, then
//! command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::GeneratorConfig;
use crate::encoder::EncoderConfig;
use crate::error::{DstError, Result};
use crate::protodst::ProtoConfig;
use crate::tracker::TrackerConfig;
use crate::training::TrainConfig;

/// Fractions of a generated corpus assigned to train and dev; the rest is test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: f64,
    pub dev: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { train: 0.7, dev: 0.15 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub split: SplitConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub proto: ProtoConfig,
    pub tracker: TrackerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            generator: GeneratorConfig::default(),
            split: SplitConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::desk(),
            proto: ProtoConfig::desk(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(raw: &str) -> Result<Self> {
        toml::from_str(raw).map_err(|e| DstError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| DstError::io(path, e))?)
    }

    /// One seed drives every random component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.proto.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.proto.validate()?;
        self.generator.validate()?;
        if !(self.split.train > 0.0 && self.split.dev > 0.0 && self.split.train + self.split.dev <= 1.0) {
            return Err(DstError::Config("split fractions must be positive and sum to at most 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_values_override_defaults_and_seed_overrides_file() {
        let cfg = RunConfig::from_toml("seed = 4\n[train]\nlearning_rate = 0.01\np_td = 0.0\n[encoder]\nd = 16\n").unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.train.learning_rate, 0.01);
        assert_eq!(cfg.train.p_td, 0.0);
        assert_eq!(cfg.train.batch_size, TrainConfig::desk().batch_size);
        assert_eq!(cfg.encoder.d, 16);
        let cfg = cfg.with_seed(9);
        assert_eq!((cfg.train.seed, cfg.proto.seed), (9, 9));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(RunConfig::from_toml("[train]\np_td = \"high\"\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rat = 0.1\n").is_err());
        assert!(RunConfig::from_toml("[trainer]\n").is_err());
        let cfg = RunConfig::from_toml("[train]\np_hd = 1.5\n").unwrap();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn documented_defaults_match() {
        let raw = r#"
seed = 0
[generator]
dialogues = 500
[split]
train = 0.7
dev = 0.15
[encoder]
d = 32
layers = 2
heads = 2
ffn_dim = 64
max_len = 180
dropout = 0.1
[train]
lambdas = [0.8, 2.0, 0.1, 0.1]
learning_rate = 2e-3
batch_size = 8
max_epochs = 40
p_td = 0.3
p_hd = 0.3
p_unk_mode = "random_token"
inform_masking = false
squared_error = "sum"
[proto]
max_epochs = 200
batch_size = 8
p_neg = 0.1
nu = 0.3
encoder_dropout = 0.0
[tracker]
tau = 0.5
value_matching = true
l2_rule = "argmin"
"#;
        assert_eq!(RunConfig::from_toml(raw).unwrap(), RunConfig::default());
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }
}
