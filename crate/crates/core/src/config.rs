//! Run configuration: one TOML file drives every subcommand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DEFAULT_MIN_COUNT;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    #[serde(default = "default_min_count")]
    pub min_count: usize,
}

fn default_min_count() -> usize {
    DEFAULT_MIN_COUNT
}

fn default_alpha() -> f64 {
    0.2
}

/// Exactly one of `data` and `synth` names the ratings to use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the user split, initialisation, task sampling and evaluation.
    #[serde(default)]
    pub seed: u64,
    /// Fraction of overlapping users held out as cold-start users.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            alpha: default_alpha(),
            data: None,
            synth: Some(SynthConfig::default()),
            model: ModelConfig::default(),
            train: TrainingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("set either [data] or [synth], not both".into())),
            (None, None) => return Err(Error::Config("one of [data] or [synth] is required".into())),
            _ => {}
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if let Some(s) = &self.synth {
            s.validate()?;
        }
        self.model.validate()?;
        self.training().validate()
    }

    /// Training settings with the run seed applied.
    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// SHA-256 of the canonical serialisation; insensitive to formatting
    /// and key order in the source file.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse() {
        let cfg = RunConfig::from_toml("[synth]\n").unwrap();
        assert_eq!(cfg.train, TrainingConfig::default());
        assert_eq!(cfg.model, ModelConfig::default());
        assert_eq!(cfg.alpha, 0.2);
    }

    #[test]
    fn unknown_keys_rejected() {
        for text in [
            "[synth]\n[train]\nlamda = 0.3\n",
            "sed = 1\n[synth]\n",
            "[synth]\n[model.ablations]\nfoo = true\n",
        ] {
            assert!(matches!(RunConfig::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn every_field_addressable() {
        let text = r#"
            seed = 7
            alpha = 0.3
            [synth]
            n_users = 40
            [model]
            d = 4
            hidden = 16
            decoder_depth = 2
            test_latent_mode = "sample"
            [model.ablations]
            prm = true
            acp = true
            [train]
            lambda = 0.5
            learning_rate = 0.005
            epochs = 3
            tasks_per_epoch = 12
            support_size = 8
            query_size = 6
            history_len = 5
            aux_weight = 0.0
            aux_batch = 16
            freeze_cold_users = true
            workers = 2
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.training().seed, 7);
        assert_eq!(cfg.train.tasks_per_epoch, Some(12));
        assert!(cfg.model.ablations.prm && cfg.model.ablations.acp);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn exactly_one_data_source() {
        assert!(RunConfig::from_toml("seed = 1\n").is_err());
        let both = "[synth]\n[data]\nsource = \"a\"\ntarget = \"b\"\n";
        assert!(RunConfig::from_toml(both).is_err());
    }

    #[test]
    fn hash_ignores_formatting() {
        let a = RunConfig::from_toml("seed = 1\n[synth]\n").unwrap();
        let b = RunConfig::from_toml("# comment\nseed=1\n\n[synth]\n").unwrap();
        let c = RunConfig::from_toml("seed = 2\n[synth]\n").unwrap();
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
    }
}
