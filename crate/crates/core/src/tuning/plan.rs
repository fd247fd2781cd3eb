use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, TuningError};
use crate::model::ParameterRegistry;
use crate::tensor::{BlockLabel, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "custom")]
    Custom,
    #[serde(rename = "l-eo")]
    LightweightEmbeddingOutput,
    #[serde(rename = "l-ldb")]
    LightweightLastDecoderBlock,
    #[serde(rename = "prefix")]
    Prefix,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 4] = [
        StrategyKind::Custom,
        StrategyKind::LightweightEmbeddingOutput,
        StrategyKind::LightweightLastDecoderBlock,
        StrategyKind::Prefix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Custom => "custom",
            StrategyKind::LightweightEmbeddingOutput => "l-eo",
            StrategyKind::LightweightLastDecoderBlock => "l-ldb",
            StrategyKind::Prefix => "prefix",
        }
    }

    /// Short column heading for reports.
    pub fn title(self) -> &'static str {
        match self {
            StrategyKind::Custom => "Custom",
            StrategyKind::LightweightEmbeddingOutput => "L-EO",
            StrategyKind::LightweightLastDecoderBlock => "L-LDB",
            StrategyKind::Prefix => "Prefix",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = TuningError;

    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s) || k.title().eq_ignore_ascii_case(s))
            .ok_or_else(|| TuningError::UnknownStrategy(s.to_string()))
    }
}

/// Frozen flag per block label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FreezePlan {
    pub strategy: StrategyKind,
    pub frozen: BTreeMap<BlockLabel, bool>,
}

impl FreezePlan {
    pub fn is_frozen(&self, block: BlockLabel) -> Option<bool> {
        self.frozen.get(&block).copied()
    }

    pub fn trainable_blocks(&self) -> Vec<BlockLabel> {
        self.frozen.iter().filter(|(_, &f)| !f).map(|(&b, _)| b).collect()
    }

    pub fn frozen_blocks(&self) -> Vec<BlockLabel> {
        self.frozen.iter().filter(|(_, &f)| f).map(|(&b, _)| b).collect()
    }
}

pub fn make_freeze_plan(strategy: StrategyKind, registry: &ParameterRegistry) -> Result<FreezePlan> {
    registry
        .validate_labels()
        .map_err(|e| TuningError::UnknownBlock(e.to_string()))?;
    let last = BlockLabel::DecoderBlock(registry.decoder_layers.saturating_sub(1));
    let trainable = |b: BlockLabel| match strategy {
        StrategyKind::Custom => true,
        StrategyKind::LightweightEmbeddingOutput => matches!(
            b,
            BlockLabel::TokenEmbedding | BlockLabel::PositionalEmbedding | BlockLabel::OutputLayer
        ),
        StrategyKind::LightweightLastDecoderBlock => b == last,
        StrategyKind::Prefix => b == BlockLabel::Prefix,
    };
    let mut frozen: BTreeMap<BlockLabel, bool> = registry.blocks().into_iter().map(|b| (b, !trainable(b))).collect();
    if strategy == StrategyKind::Prefix {
        frozen.insert(BlockLabel::Prefix, false);
    }
    Ok(FreezePlan { strategy, frozen })
}

/// Sets every parameter's frozen flag from the plan.
pub fn apply_freeze_plan(plan: &FreezePlan, store: &mut ParamStore) -> Result<()> {
    if let Some(p) = store.iter().find(|p| !plan.frozen.contains_key(&p.block)) {
        return Err(TuningError::UnknownBlock(p.block.to_string()));
    }
    for p in store.iter_mut() {
        p.set_frozen(plan.frozen[&p.block]);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn names_round_trip() {
        for k in StrategyKind::ALL {
            assert_eq!(k.name().parse::<StrategyKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{}\"", k.name()));
        }
        assert!("lora".parse::<StrategyKind>().is_err());
    }

    #[test]
    fn plans_per_strategy() {
        let reg = ParameterRegistry::from_config(&ModelConfig::bart_large());
        let custom = make_freeze_plan(StrategyKind::Custom, &reg).unwrap();
        assert!(custom.frozen_blocks().is_empty());
        let ldb = make_freeze_plan(StrategyKind::LightweightLastDecoderBlock, &reg).unwrap();
        assert_eq!(ldb.trainable_blocks(), vec![BlockLabel::DecoderBlock(11)]);
        let eo = make_freeze_plan(StrategyKind::LightweightEmbeddingOutput, &reg).unwrap();
        assert_eq!(
            eo.trainable_blocks(),
            vec![BlockLabel::TokenEmbedding, BlockLabel::PositionalEmbedding, BlockLabel::OutputLayer]
        );
        let pre = make_freeze_plan(StrategyKind::Prefix, &reg).unwrap();
        assert_eq!(pre.trainable_blocks(), vec![BlockLabel::Prefix]);
        assert_eq!(pre.frozen_blocks().len(), reg.blocks().len());
    }

    #[test]
    fn bad_labels_rejected() {
        let mut reg = ParameterRegistry::from_config(&ModelConfig::toy());
        reg.entries[3].block = BlockLabel::EncoderBlock(9);
        assert!(make_freeze_plan(StrategyKind::Custom, &reg).is_err());
    }
}
