use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, Result};

/// Dimensions of the encoder-decoder transformer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    #[serde(default = "default_tie")]
    pub tie_output_to_embedding: bool,
}

fn default_tie() -> bool {
    true
}

impl ModelConfig {
    /// BART-large dimensions (the 406M-parameter reference model).
    pub fn bart_large() -> Self {
        Self {
            vocab_size: 50265,
            d_model: 1024,
            num_heads: 16,
            ffn_dim: 4096,
            encoder_layers: 12,
            decoder_layers: 12,
            max_positions: 1024,
            tie_output_to_embedding: true,
        }
    }

    /// Small configuration used for quick experiments.
    pub fn toy() -> Self {
        Self {
            vocab_size: 512,
            d_model: 64,
            num_heads: 4,
            ffn_dim: 256,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 128,
            tie_output_to_embedding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.num_heads
    }

    pub fn total_layers(&self) -> usize {
        self.encoder_layers + self.decoder_layers
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if self.d_model % self.num_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} is not divisible by num_heads {}",
                self.d_model, self.num_heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(ModelError::InvalidConfig(
                "need at least one encoder and one decoder layer".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| ModelError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ModelError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
