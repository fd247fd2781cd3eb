//! Parameter layout of the model and the per-block census derived from it.

use std::collections::BTreeMap;

use serde::Serialize;

use super::{ModelConfig, ModelError, Result};
use crate::tensor::{BlockLabel, ParamStore};
use crate::tuning::StrategyKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub id: String,
    pub block: BlockLabel,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(id: String, block: BlockLabel, shape: Vec<usize>, init: Init) -> Self {
        Self { id, block, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn linear(out: &mut Vec<ParamSpec>, name: &str, block: BlockLabel, fan_in: usize, fan_out: usize) {
    out.push(ParamSpec::new(format!("{name}.weight"), block, vec![fan_in, fan_out], Init::Normal));
    out.push(ParamSpec::new(format!("{name}.bias"), block, vec![fan_out], Init::Zeros));
}

fn norm(out: &mut Vec<ParamSpec>, name: &str, block: BlockLabel, d: usize) {
    out.push(ParamSpec::new(format!("{name}.weight"), block, vec![d], Init::Ones));
    out.push(ParamSpec::new(format!("{name}.bias"), block, vec![d], Init::Zeros));
}

fn attention(out: &mut Vec<ParamSpec>, name: &str, block: BlockLabel, d: usize) {
    for proj in ["q_proj", "k_proj", "v_proj", "out_proj"] {
        linear(out, &format!("{name}.{proj}"), block, d, d);
    }
}

/// Every parameter of the base model, in allocation order.
pub fn parameter_layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    out.push(ParamSpec::new(
        "embed_tokens.weight".into(),
        BlockLabel::TokenEmbedding,
        vec![cfg.vocab_size, d],
        Init::Normal,
    ));
    for side in ["encoder", "decoder"] {
        out.push(ParamSpec::new(
            format!("{side}.embed_positions.weight"),
            BlockLabel::PositionalEmbedding,
            vec![cfg.max_positions, d],
            Init::Normal,
        ));
        norm(&mut out, &format!("{side}.layernorm_embedding"), BlockLabel::PositionalEmbedding, d);
    }
    for i in 0..cfg.encoder_layers {
        let b = BlockLabel::EncoderBlock(i);
        let p = format!("encoder.layers.{i}");
        attention(&mut out, &format!("{p}.self_attn"), b, d);
        norm(&mut out, &format!("{p}.self_attn_layer_norm"), b, d);
        linear(&mut out, &format!("{p}.fc1"), b, d, cfg.ffn_dim);
        linear(&mut out, &format!("{p}.fc2"), b, cfg.ffn_dim, d);
        norm(&mut out, &format!("{p}.final_layer_norm"), b, d);
    }
    for i in 0..cfg.decoder_layers {
        let b = BlockLabel::DecoderBlock(i);
        let p = format!("decoder.layers.{i}");
        attention(&mut out, &format!("{p}.self_attn"), b, d);
        norm(&mut out, &format!("{p}.self_attn_layer_norm"), b, d);
        attention(&mut out, &format!("{p}.encoder_attn"), b, d);
        norm(&mut out, &format!("{p}.encoder_attn_layer_norm"), b, d);
        linear(&mut out, &format!("{p}.fc1"), b, d, cfg.ffn_dim);
        linear(&mut out, &format!("{p}.fc2"), b, cfg.ffn_dim, d);
        norm(&mut out, &format!("{p}.final_layer_norm"), b, d);
    }
    if !cfg.tie_output_to_embedding {
        out.push(ParamSpec::new(
            "lm_head.weight".into(),
            BlockLabel::OutputLayer,
            vec![d, cfg.vocab_size],
            Init::Normal,
        ));
    }
    out.push(ParamSpec::new(
        "final_logits_bias".into(),
        BlockLabel::OutputLayer,
        vec![cfg.vocab_size],
        Init::Zeros,
    ));
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RegistryEntry {
    pub id: String,
    pub block: BlockLabel,
    pub count: usize,
}

/// Census of every parameter group of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParameterRegistry {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub entries: Vec<RegistryEntry>,
}

impl ParameterRegistry {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            encoder_layers: cfg.encoder_layers,
            decoder_layers: cfg.decoder_layers,
            entries: parameter_layout(cfg)
                .into_iter()
                .map(|s| RegistryEntry {
                    count: s.numel(),
                    id: s.id,
                    block: s.block,
                })
                .collect(),
        }
    }

    pub fn from_store(store: &ParamStore, encoder_layers: usize, decoder_layers: usize) -> Self {
        Self {
            encoder_layers,
            decoder_layers,
            entries: store
                .iter()
                .map(|p| RegistryEntry {
                    id: p.id.clone(),
                    block: p.block,
                    count: p.numel(),
                })
                .collect(),
        }
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.count).sum()
    }

    pub fn by_block(&self) -> BTreeMap<BlockLabel, usize> {
        let mut m = BTreeMap::new();
        for e in &self.entries {
            *m.entry(e.block).or_insert(0) += e.count;
        }
        m
    }

    pub fn blocks(&self) -> Vec<BlockLabel> {
        self.by_block().into_keys().collect()
    }

    /// Fails on any label whose layer index exceeds the configured depth.
    pub fn validate_labels(&self) -> Result<()> {
        for e in &self.entries {
            let ok = match e.block {
                BlockLabel::EncoderBlock(i) => i < self.encoder_layers,
                BlockLabel::DecoderBlock(i) => i < self.decoder_layers,
                _ => true,
            };
            if !ok {
                return Err(ModelError::UnknownBlock(e.block.to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub total: u64,
    pub trainable: u64,
}

impl ParamCount {
    pub fn trainable_fraction(&self) -> f64 {
        self.trainable as f64 / self.total as f64
    }
}

/// Closed-form sizes of each architectural group.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockSizes {
    pub token_embedding: u64,
    pub positional: u64,
    pub encoder_layer: u64,
    pub decoder_layer: u64,
    pub output: u64,
}

impl BlockSizes {
    pub fn of(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model as u64;
        let f = cfg.ffn_dim as u64;
        let v = cfg.vocab_size as u64;
        let attn = 4 * (d * d + d);
        let ln = 2 * d;
        let ffn = d * f + f + f * d + d;
        Self {
            token_embedding: v * d,
            positional: 2 * (cfg.max_positions as u64 * d + ln),
            encoder_layer: attn + ln + ffn + ln,
            decoder_layer: 2 * attn + 3 * ln + ffn,
            output: v + if cfg.tie_output_to_embedding { 0 } else { d * v },
        }
    }

    pub fn base_total(&self, cfg: &ModelConfig) -> u64 {
        self.token_embedding
            + self.positional
            + cfg.encoder_layers as u64 * self.encoder_layer
            + cfg.decoder_layers as u64 * self.decoder_layer
            + self.output
    }
}

/// Prefix parameters: key and value streams of `prefix_length` states for
/// every encoder and decoder block.
pub fn prefix_parameter_count(cfg: &ModelConfig, prefix_length: usize) -> u64 {
    cfg.d_model as u64 * prefix_length as u64 * cfg.total_layers() as u64 * 2
}

/// Total and trainable parameter counts for a strategy, by arithmetic only.
pub fn count_parameters(cfg: &ModelConfig, strategy: StrategyKind, prefix_length: usize) -> Result<ParamCount> {
    cfg.validate()?;
    let s = BlockSizes::of(cfg);
    let base = s.base_total(cfg);
    Ok(match strategy {
        StrategyKind::Custom => ParamCount {
            total: base,
            trainable: base,
        },
        StrategyKind::LightweightEmbeddingOutput => ParamCount {
            total: base,
            trainable: s.token_embedding + s.positional + s.output,
        },
        StrategyKind::LightweightLastDecoderBlock => ParamCount {
            total: base,
            trainable: s.decoder_layer,
        },
        StrategyKind::Prefix => {
            if prefix_length == 0 {
                return Err(ModelError::InvalidStrategy("prefix tuning needs prefix_length > 0".into()));
            }
            let p = prefix_parameter_count(cfg, prefix_length);
            ParamCount {
                total: base + p,
                trainable: p,
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_matches_closed_form() {
        for tie in [true, false] {
            for cfg in [ModelConfig::toy(), ModelConfig::bart_large()] {
                let cfg = ModelConfig {
                    tie_output_to_embedding: tie,
                    ..cfg
                };
                let reg = ParameterRegistry::from_config(&cfg);
                let closed = count_parameters(&cfg, StrategyKind::Custom, 0).unwrap();
                assert_eq!(reg.total() as u64, closed.total);
                let by_block = reg.by_block();
                let s = BlockSizes::of(&cfg);
                assert_eq!(by_block[&BlockLabel::DecoderBlock(0)] as u64, s.decoder_layer);
                assert_eq!(by_block[&BlockLabel::EncoderBlock(1)] as u64, s.encoder_layer);
            }
        }
    }

    #[test]
    fn custom_trains_everything() {
        let c = count_parameters(&ModelConfig::toy(), StrategyKind::Custom, 0).unwrap();
        assert_eq!(c.total, c.trainable);
    }

    #[test]
    fn prefix_adds_parameters() {
        let cfg = ModelConfig::bart_large();
        let base = count_parameters(&cfg, StrategyKind::Custom, 0).unwrap();
        let pre = count_parameters(&cfg, StrategyKind::Prefix, 200).unwrap();
        assert_eq!(pre.trainable, 1024 * 200 * 24 * 2);
        assert_eq!(pre.total, base.total + pre.trainable);
        assert!(count_parameters(&cfg, StrategyKind::Prefix, 0).is_err());
    }

    #[test]
    fn reference_table() {
        let cfg = ModelConfig::bart_large();
        let custom = count_parameters(&cfg, StrategyKind::Custom, 0).unwrap();
        assert!((custom.total as f64 / 406e6 - 1.0).abs() < 0.03);
        let eo = count_parameters(&cfg, StrategyKind::LightweightEmbeddingOutput, 0).unwrap();
        assert!((eo.trainable as f64 / 1e6 - 53.6).abs() < 0.1, "{}", eo.trainable);
        let ldb = count_parameters(&cfg, StrategyKind::LightweightLastDecoderBlock, 0).unwrap();
        assert_eq!(ldb.trainable, 16_796_672);
    }

    #[test]
    fn out_of_depth_label_rejected() {
        let mut reg = ParameterRegistry::from_config(&ModelConfig::toy());
        reg.entries[0].block = BlockLabel::DecoderBlock(7);
        assert!(reg.validate_labels().is_err());
    }
}
