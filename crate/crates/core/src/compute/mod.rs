//! Analytic training-compute accounting.
//!
//! Every block has weight-matmul work `W` (two FLOPs per weight per token)
//! and activation-only work `A` (attention score and mixing matmuls).
//! The backward pass costs `W + 2A` to pass gradients through a block and
//! another `W` to form its weight gradients, so full fine-tuning costs
//! exactly three forward passes.

use std::fmt::Write;

use serde::Serialize;

use crate::model::{BlockSizes, ModelConfig};
use crate::tensor::BlockLabel;
use crate::tuning::{FreezePlan, StrategyKind};

pub const FLOPS_PER_PF_SECOND: f64 = 1e15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BlockCost {
    pub block: BlockLabel,
    pub weight_flops: f64,
    pub activation_flops: f64,
}

impl BlockCost {
    pub fn forward(&self) -> f64 {
        self.weight_flops + self.activation_flops
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopModel {
    pub config: ModelConfig,
    /// Attention context length.
    pub n_ctx: usize,
    /// Prefix positions attended by every self-attention; 0 without a prefix.
    pub prefix_length: usize,
}

impl FlopModel {
    pub fn new(config: &ModelConfig) -> Self {
        Self {
            n_ctx: config.max_positions,
            config: config.clone(),
            prefix_length: 0,
        }
    }

    pub fn with_context(mut self, n_ctx: usize) -> Self {
        self.n_ctx = n_ctx;
        self
    }

    pub fn with_prefix(mut self, prefix_length: usize) -> Self {
        self.prefix_length = prefix_length;
        self
    }

    /// The model as trained under `strategy`: only Prefix carries prefix positions.
    pub fn for_strategy(config: &ModelConfig, strategy: StrategyKind, prefix_length: usize) -> Self {
        let p = if strategy == StrategyKind::Prefix { prefix_length } else { 0 };
        Self::new(config).with_prefix(p)
    }

    /// Embedding lookup correction, per token.
    pub fn embedding_correction(&self) -> f64 {
        4.0 * self.config.d_model as f64
    }

    /// Non-embedding parameters: all encoder and decoder blocks.
    pub fn nonembedding_params(&self) -> f64 {
        let s = BlockSizes::of(&self.config);
        (self.config.encoder_layers as u64 * s.encoder_layer + self.config.decoder_layers as u64 * s.decoder_layer) as f64
    }

    /// `2 N_nonemb + 4 d`, the weight-only estimate.
    pub fn nonembedding_estimate(&self) -> f64 {
        2.0 * self.nonembedding_params() + self.embedding_correction()
    }

    pub fn block_costs(&self) -> Vec<BlockCost> {
        let c = &self.config;
        let s = BlockSizes::of(c);
        let d = c.d_model as f64;
        let attn = 4.0 * self.n_ctx as f64 * d;
        let prefix = 4.0 * self.prefix_length as f64 * d;
        let mut out = vec![
            BlockCost {
                block: BlockLabel::TokenEmbedding,
                weight_flops: self.embedding_correction(),
                activation_flops: 0.0,
            },
            BlockCost {
                block: BlockLabel::PositionalEmbedding,
                weight_flops: 0.0,
                activation_flops: 0.0,
            },
        ];
        for i in 0..c.encoder_layers {
            out.push(BlockCost {
                block: BlockLabel::EncoderBlock(i),
                weight_flops: 2.0 * s.encoder_layer as f64,
                activation_flops: attn + prefix,
            });
        }
        for i in 0..c.decoder_layers {
            out.push(BlockCost {
                block: BlockLabel::DecoderBlock(i),
                weight_flops: 2.0 * s.decoder_layer as f64,
                activation_flops: 2.0 * attn + prefix,
            });
        }
        out.push(BlockCost {
            block: BlockLabel::OutputLayer,
            weight_flops: 2.0 * d * c.vocab_size as f64,
            activation_flops: 0.0,
        });
        out
    }

    pub fn forward_per_token(&self) -> f64 {
        self.block_costs().iter().map(BlockCost::forward).sum()
    }

    /// Whether gradients must flow back through `block`: some trainable
    /// parameter feeds into it.
    fn on_gradient_path(&self, block: BlockLabel, plan: &FreezePlan) -> bool {
        let trainable = |b: BlockLabel| plan.is_frozen(b) == Some(false);
        let prefix = self.prefix_length > 0 && trainable(BlockLabel::Prefix);
        let embeddings = trainable(BlockLabel::TokenEmbedding) || trainable(BlockLabel::PositionalEmbedding);
        let enc = self.config.encoder_layers;
        match block {
            BlockLabel::TokenEmbedding | BlockLabel::PositionalEmbedding | BlockLabel::Prefix => false,
            BlockLabel::EncoderBlock(i) => embeddings || prefix || (0..i).any(|j| trainable(BlockLabel::EncoderBlock(j))),
            BlockLabel::DecoderBlock(i) => {
                embeddings
                    || prefix
                    || (0..enc).any(|j| trainable(BlockLabel::EncoderBlock(j)))
                    || (0..i).any(|j| trainable(BlockLabel::DecoderBlock(j)))
            }
            BlockLabel::OutputLayer => plan.frozen.iter().any(|(&b, &f)| !f && b != BlockLabel::OutputLayer && (b != BlockLabel::Prefix || self.prefix_length > 0)),
        }
    }

    /// Whether `block` computes weight gradients. The tied output projection
    /// is trained whenever the token embedding is.
    fn has_weight_gradient(&self, block: BlockLabel, plan: &FreezePlan) -> bool {
        let trainable = |b: BlockLabel| plan.is_frozen(b) == Some(false);
        match block {
            BlockLabel::OutputLayer => {
                trainable(BlockLabel::OutputLayer)
                    || (self.config.tie_output_to_embedding && trainable(BlockLabel::TokenEmbedding))
            }
            b => trainable(b),
        }
    }

    /// Training FLOPs per token under a freeze plan.
    pub fn train_per_token(&self, plan: &FreezePlan) -> f64 {
        let mut total = 0.0;
        for b in self.block_costs() {
            total += b.forward();
            let embedding = matches!(b.block, BlockLabel::TokenEmbedding | BlockLabel::PositionalEmbedding);
            if embedding {
                if self.has_weight_gradient(b.block, plan) {
                    total += 2.0 * b.forward();
                }
                continue;
            }
            if self.on_gradient_path(b.block, plan) {
                total += b.weight_flops + 2.0 * b.activation_flops;
            }
            if self.has_weight_gradient(b.block, plan) {
                total += b.weight_flops;
            }
        }
        total
    }

    pub fn train_step(&self, plan: &FreezePlan, tokens: usize) -> f64 {
        self.train_per_token(plan) * tokens as f64
    }
}

pub fn flops_forward_per_token(config: &ModelConfig) -> f64 {
    FlopModel::new(config).forward_per_token()
}

pub fn flops_train_step(model: &FlopModel, plan: &FreezePlan, tokens: usize) -> f64 {
    model.train_step(plan, tokens)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub cumulative_flops: f64,
    pub val_loss: f64,
}

/// Cumulative training compute and the validation losses seen along the way.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct FlopLedger {
    cumulative: f64,
    tokens: u64,
    steps: u64,
    points: Vec<CurvePoint>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one step's compute; a validation loss, when given, is stored
    /// against the new cumulative total. Negative or non-finite compute is
    /// ignored with a warning.
    pub fn record(&mut self, step_flops: f64, tokens: u64, val_loss: Option<f64>) {
        if step_flops.is_finite() && step_flops >= 0.0 {
            self.cumulative += step_flops;
            self.tokens += tokens;
            if step_flops > 0.0 || tokens > 0 {
                self.steps += 1;
            }
        } else {
            log::warn!("ignoring step compute {step_flops}");
        }
        if let Some(loss) = val_loss {
            self.points.push(CurvePoint {
                step: self.steps,
                cumulative_flops: self.cumulative,
                val_loss: loss,
            });
        }
    }

    pub fn cumulative(&self) -> f64 {
        self.cumulative
    }

    pub fn tokens(&self) -> u64 {
        self.tokens
    }

    pub fn pf_seconds(&self) -> f64 {
        self.cumulative / FLOPS_PER_PF_SECOND
    }

    pub fn points(&self) -> &[CurvePoint] {
        &self.points
    }
}

/// One row of the loss-versus-compute export.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub strategy: String,
    pub project: String,
    pub fold: usize,
    pub cumulative_flops: f64,
    pub pf_seconds: f64,
    pub val_loss: f64,
}

impl CurveRow {
    pub fn from_ledger(strategy: &str, project: &str, fold: usize, ledger: &FlopLedger) -> Vec<Self> {
        ledger
            .points()
            .iter()
            .map(|p| CurveRow {
                strategy: strategy.to_string(),
                project: project.to_string(),
                fold,
                cumulative_flops: p.cumulative_flops,
                pf_seconds: p.cumulative_flops / FLOPS_PER_PF_SECOND,
                val_loss: p.val_loss,
            })
            .collect()
    }
}

/// Rows grouped by run and sorted by compute within each run.
pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut rows: Vec<&CurveRow> = rows.iter().collect();
    rows.sort_by(|a, b| {
        (a.strategy.as_str(), a.project.as_str(), a.fold)
            .cmp(&(b.strategy.as_str(), b.project.as_str(), b.fold))
            .then(a.cumulative_flops.total_cmp(&b.cumulative_flops))
    });
    let mut out = String::from("strategy,project,fold,cumulative_flops,pf_seconds,val_loss\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:e},{:e},{:.6}",
            r.strategy, r.project, r.fold, r.cumulative_flops, r.pf_seconds, r.val_loss
        )
        .unwrap();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ParameterRegistry;
    use crate::tuning::make_freeze_plan;

    fn plan(cfg: &ModelConfig, s: StrategyKind) -> FreezePlan {
        make_freeze_plan(s, &ParameterRegistry::from_config(cfg)).unwrap()
    }

    #[test]
    fn custom_is_three_forward() {
        for cfg in [ModelConfig::toy(), ModelConfig::bart_large()] {
            let m = FlopModel::new(&cfg);
            let t = m.train_per_token(&plan(&cfg, StrategyKind::Custom));
            assert!((t - 3.0 * m.forward_per_token()).abs() <= 1e-9 * t);
        }
    }

    #[test]
    fn reference_nonembedding_term() {
        let m = FlopModel::new(&ModelConfig::bart_large());
        assert!((m.nonembedding_estimate() / 7.0e8 - 1.0).abs() < 0.02);
    }

    #[test]
    fn strategy_ordering() {
        let cfg = ModelConfig::bart_large();
        let cost = |s| FlopModel::for_strategy(&cfg, s, 200).train_per_token(&plan(&cfg, s));
        let ldb = cost(StrategyKind::LightweightLastDecoderBlock);
        let pre = cost(StrategyKind::Prefix);
        let eo = cost(StrategyKind::LightweightEmbeddingOutput);
        let custom = cost(StrategyKind::Custom);
        assert!(ldb < pre && pre <= eo && eo <= custom, "{ldb} {pre} {eo} {custom}");
    }

    #[test]
    fn ffn_term_is_linear() {
        let cfg = ModelConfig::toy();
        let wide = ModelConfig { ffn_dim: 2 * cfg.ffn_dim, ..cfg.clone() };
        let ffn = |c: &ModelConfig| {
            let d = c.d_model as f64;
            let f = c.ffn_dim as f64;
            (c.encoder_layers + c.decoder_layers) as f64 * 2.0 * (2.0 * d * f + f)
        };
        let base = flops_forward_per_token(&cfg);
        let doubled = flops_forward_per_token(&wide);
        assert!((doubled - base - ffn(&cfg)).abs() < 1e-6);
        assert!((ffn(&wide) - 2.0 * ffn(&cfg)).abs() < 1e-9);
    }

    #[test]
    fn ledger_accumulates() {
        let mut l = FlopLedger::new();
        assert_eq!(l.cumulative(), 0.0);
        l.record(5.0, 1, None);
        l.record(7.0, 1, Some(0.5));
        assert_eq!(l.cumulative(), 12.0);
        assert_eq!(l.pf_seconds(), 12.0 / 1e15);
        assert_eq!(l.points().len(), 1);
        let csv = curve_csv(&CurveRow::from_ledger("custom", "p", 0, &l));
        assert_eq!(csv.lines().nth(1).unwrap(), "custom,p,0,1.2e1,1.2e-14,0.500000");
    }
}
