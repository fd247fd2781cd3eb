use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::model::ModelConfig;
use crate::tensor::OptimizerKind;
use crate::tuning::StrategyKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    /// Validation rounds without improvement tolerated before stopping.
    pub patience: usize,
    pub eval_every: usize,
    pub max_steps: usize,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 8,
            patience: 3,
            eval_every: 50,
            max_steps: 1000,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub projects: usize,
    pub overlap: f64,
    /// Inclusive range of identifier counts per project.
    pub size_range: (usize, usize),
    pub examples_per_project: usize,
    /// Projects in the generic corpus used to build the baseline.
    pub generic_projects: usize,
    pub generic_examples_per_project: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            projects: 4,
            overlap: 0.13,
            size_range: (60, 90),
            examples_per_project: 40,
            generic_projects: 40,
            generic_examples_per_project: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum ProjectSource {
    Synthetic(SyntheticSpec),
    /// JSONL files of focal/test pairs.
    Dataset { projects: PathBuf, generic: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam_width: 5,
            max_len: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub strategies: Vec<StrategyKind>,
    pub prefix_length: usize,
    /// Train the prefix on the generic corpus before each project.
    #[serde(default)]
    pub prefix_warm_start: bool,
    pub source: ProjectSource,
    pub model: ModelConfig,
    pub pretrain: TrainHyper,
    pub train: TrainHyper,
    /// Learning rate for prefix parameters, which start far from useful values.
    pub prefix_lr: Option<f64>,
    pub decode: DecodeConfig,
    /// Write a checkpoint for every run.
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_folds() -> usize {
    4
}

impl ExperimentConfig {
    /// Desk-scale grid: 4 synthetic projects, 4 strategies, 2 folds.
    pub fn toy() -> Self {
        Self {
            seed: 7,
            folds: 2,
            strategies: StrategyKind::ALL.to_vec(),
            prefix_length: 8,
            prefix_warm_start: false,
            source: ProjectSource::Synthetic(SyntheticSpec::default()),
            model: ModelConfig {
                vocab_size: 512,
                d_model: 32,
                num_heads: 4,
                ffn_dim: 64,
                encoder_layers: 2,
                decoder_layers: 2,
                max_positions: 96,
                tie_output_to_embedding: true,
            },
            pretrain: TrainHyper {
                lr: 3e-3,
                batch_size: 8,
                patience: 4,
                eval_every: 100,
                max_steps: 2000,
                optimizer: OptimizerKind::Adam,
            },
            train: TrainHyper {
                lr: 1e-3,
                batch_size: 8,
                patience: 2,
                eval_every: 20,
                max_steps: 200,
                optimizer: OptimizerKind::Adam,
            },
            prefix_lr: Some(1e-1),
            decode: DecodeConfig::default(),
            save_checkpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if self.strategies.is_empty() {
            return bad("no strategies selected");
        }
        if self.strategies.contains(&StrategyKind::Prefix) && self.prefix_length == 0 {
            return bad("prefix_length must be positive for prefix tuning");
        }
        for h in [&self.pretrain, &self.train] {
            if h.batch_size == 0 || h.eval_every == 0 || !(h.lr > 0.0) {
                return bad("batch_size, eval_every and lr must be positive");
            }
        }
        if self.decode.beam_width == 0 {
            return bad("beam_width must be at least 1");
        }
        if let ProjectSource::Synthetic(s) = &self.source {
            if !(0.0..=1.0).contains(&s.overlap) {
                return bad("overlap must lie in [0, 1]");
            }
            if s.projects == 0 || s.generic_projects == 0 {
                return bad("need at least one project");
            }
        }
        self.model.validate().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_round_trips() {
        let c = ExperimentConfig::toy();
        c.validate().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ExperimentConfig::toy();
        c.folds = 1;
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy();
        c.strategies.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::toy();
        if let ProjectSource::Synthetic(s) = &mut c.source {
            s.overlap = 1.5;
        }
        assert!(c.validate().is_err());
    }
}
