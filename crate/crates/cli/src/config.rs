use std::path::Path;

use anyhow::{Context, Result};
use nhi_core::ensemble::VoteRule;
use nhi_core::metrics::KappaWeights;
use nhi_core::preprocess::{MorphConfig, QcThresholds};
use nhi_core::synthetic::SyntheticSpec;
use nhi_core::training::{SplitRatios, TrainConfig};
use serde::{Deserialize, Serialize};

/// Run configuration. Every section is optional in the TOML file; missing
/// values take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub train: TrainConfig,
    pub splits: SplitRatios,
    pub qc: QcThresholds,
    pub morph: MorphConfig,
    pub vote_rule: VoteRule,
    pub kappa: KappaWeights,
    pub synthetic: SyntheticSpec,
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Config::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let config: Config =
            toml::from_str(&text).map_err(|e| nhi_core::Error::Invalid(format!("config {}: {e}", path.display())))?;
        Ok(config)
    }

    /// `--seed` overrides the seeds of both the trainer and the generator.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.train.seed = s;
            self.synthetic.seed = s;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_tables_fill_in_defaults() {
        let c: Config = toml::from_str("[train]\nmax_epochs = 3\npatience = 1\n[qc]\nmin_tissue = 0.5\n").unwrap();
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.learning_rate, TrainConfig::default().learning_rate);
        assert_eq!(c.qc.min_tissue, 0.5);
        assert_eq!(c.qc.min_sharpness, QcThresholds::default().min_sharpness);
        assert!(toml::from_str::<Config>("[train]\nbogus = 1\n").is_err());
    }

    #[test]
    fn seed_flag_wins() {
        let c = Config::default().with_seed(Some(9));
        assert_eq!((c.train.seed, c.synthetic.seed), (9, 9));
    }
}
