//! Experiment configuration file (JSON). Unknown keys are rejected so typos
//! fail loudly; every run can dump the fully resolved configuration.

use crate::backbone::BackboneConfig;
use crate::data::synthetic::SyntheticConfig;
use crate::error::{Error, Result};
use crate::eval::{PairingScheme, TrainConfig};
use crate::fusion::{ExchangeConfig, FusionStrategy};
use serde::{Deserialize, Serialize};
use std::path::Path;

fn default_folds() -> usize {
    5
}
fn default_strategies() -> Vec<FusionStrategy> {
    FusionStrategy::ALL.to_vec()
}
fn default_schemes() -> Vec<PairingScheme> {
    PairingScheme::ALL.to_vec()
}
fn default_attr_steps() -> usize {
    64
}
fn default_attr_chunk() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Manifest CSV relative to the experiment directory (written by
    /// `generate`, or pointing at a real cohort).
    #[serde(default)]
    pub manifest: Option<String>,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<FusionStrategy>,
    #[serde(default = "default_schemes")]
    pub eval_schemes: Vec<PairingScheme>,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub exchange: ExchangeConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_attr_steps")]
    pub attribution_steps: usize,
    #[serde(default = "default_attr_chunk")]
    pub attribution_chunk: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            manifest: None,
            synthetic: None,
            folds: default_folds(),
            strategies: default_strategies(),
            eval_schemes: default_schemes(),
            backbone: BackboneConfig::default(),
            exchange: ExchangeConfig::default(),
            train: TrainConfig::default(),
            attribution_steps: default_attr_steps(),
            attribution_chunk: default_attr_chunk(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.exchange.validate()?;
        self.train.validate()?;
        if let Some(s) = &self.synthetic {
            s.validate()?;
            if s.num_classes != self.backbone.num_classes {
                return Err(Error::config(
                    "synthetic.num_classes must match backbone.num_classes".to_string(),
                ));
            }
        }
        if self.backbone.num_classes != self.train.num_classes {
            return Err(Error::config(
                "backbone.num_classes must match train.num_classes".to_string(),
            ));
        }
        if self.folds == 0 {
            return Err(Error::config("folds must be positive".to_string()));
        }
        if self.strategies.is_empty() || self.eval_schemes.is_empty() {
            return Err(Error::config("strategies and eval_schemes must be nonempty".to_string()));
        }
        if self.attribution_steps == 0 || self.attribution_chunk == 0 {
            return Err(Error::config("attribution steps/chunk must be positive".to_string()));
        }
        Ok(())
    }

    /// Fully resolved configuration as pretty JSON (for the effective-config
    /// dump written next to run outputs).
    pub fn to_pretty_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
