//! Run configuration: a TOML file whose values command-line flags override.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use mvr_core::encoder::EncoderConfig;
use mvr_core::eval::{ScoreNormalization, DEFAULT_KS};
use mvr_core::index::AnnParams;
use mvr_core::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub index: Option<PathBuf>,
    /// Per-epoch metrics log (JSONL).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    pub max_size: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig { max_size: 30_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum IndexMode {
    /// Exhaustive scan.
    #[default]
    Flat,
    /// Graph search.
    Ann,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexConfig {
    pub mode: IndexMode,
    pub ann: AnnParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub normalization: ScoreNormalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: DEFAULT_KS.to_vec(),
            normalization: ScoreNormalization::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: PathsConfig,
    pub vocab: VocabConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub index: IndexConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults when `path` is `None`; unknown keys are an error.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("{}: cannot read config", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("{}: invalid config", path.display()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.index.ann.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            bail!("eval ks must be a non-empty list of positive integers");
        }
        if self.vocab.max_size == 0 {
            bail!("vocab max_size must be positive");
        }
        Ok(())
    }
}

/// The path, or a usage error naming the flag that would supply it.
pub fn require<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| anyhow::Error::new(UsageError(format!("missing {flag} (flag or config paths section)"))))
}

/// The path, which must already exist.
pub fn require_existing<'a>(path: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    let p = require(path, flag)?;
    if !p.exists() {
        return Err(anyhow::Error::new(MissingFile(p.to_path_buf())));
    }
    Ok(p)
}

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

#[derive(Debug, thiserror::Error)]
#[error("file not found: {}", .0.display())]
pub struct MissingFile(pub PathBuf);

#[cfg(test)]
mod tests {
    use super::*;
    use mvr_core::scoring::TauMode;

    #[test]
    fn default_config_round_trips() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn customized_config_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = Some("data/corpus.jsonl".into());
        cfg.encoder.d_model = 48;
        cfg.train.learning_rate = 3e-3;
        cfg.train.loss.lambda = 0.1234567890123;
        cfg.train.loss.tau_mode = TauMode::Fixed { tau: 0.7 };
        cfg.index.mode = IndexMode::Ann;
        cfg.eval.ks = vec![1, 10];
        cfg.eval.normalization = ScoreNormalization::MinMax;
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochz = 3\n").is_err());
        assert!(RunConfig::from_toml("[nope]\n").is_err());
        assert!(RunConfig::from_toml("[train.loss]\nlambda = 0.5\nbeta = 1\n").is_err());
    }

    #[test]
    fn partial_config_keeps_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    }
}
