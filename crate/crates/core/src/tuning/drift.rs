use std::collections::BTreeMap;
use std::fmt::Write;

use serde::Serialize;

use super::{Result, TuningError};
use crate::tensor::{BlockLabel, Checkpoint};

/// Mean absolute parameter change per block, in plotting order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DriftReport {
    pub blocks: Vec<(BlockLabel, f64)>,
}

impl DriftReport {
    pub fn get(&self, block: BlockLabel) -> Option<f64> {
        self.blocks.iter().find(|(b, _)| *b == block).map(|(_, v)| *v)
    }

    /// Blocks with any change at all.
    pub fn support(&self) -> Vec<BlockLabel> {
        self.blocks.iter().filter(|(_, v)| *v > 0.0).map(|(b, _)| *b).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("block_label,mean_abs_change\n");
        for (b, v) in &self.blocks {
            writeln!(out, "{b},{v:e}").unwrap();
        }
        out
    }
}

pub fn drift_report(before: &Checkpoint, after: &Checkpoint) -> Result<DriftReport> {
    if before.entries.len() != after.entries.len() {
        return Err(TuningError::RegistryMismatch(format!(
            "{} vs {} parameters",
            before.entries.len(),
            after.entries.len()
        )));
    }
    let mut sums: BTreeMap<BlockLabel, (f64, usize)> = BTreeMap::new();
    for (a, b) in before.entries.iter().zip(&after.entries) {
        if a.id != b.id || a.block != b.block || a.shape != b.shape {
            return Err(TuningError::RegistryMismatch(format!("`{}` vs `{}`", a.id, b.id)));
        }
        let s = sums.entry(a.block).or_insert((0.0, 0));
        s.0 += a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs()).sum::<f64>();
        s.1 += a.values.len();
    }
    Ok(DriftReport {
        blocks: sums.into_iter().map(|(b, (s, n))| (b, s / n as f64)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    #[test]
    fn untouched_model_has_zero_drift() {
        let m = build_model(&ModelConfig::toy(), 1).unwrap();
        let c = Checkpoint::from_store(&m.store);
        let r = drift_report(&c, &c).unwrap();
        assert!(r.support().is_empty());
        assert_eq!(r.blocks.first().unwrap().0, BlockLabel::TokenEmbedding);
        assert_eq!(r.blocks.last().unwrap().0, BlockLabel::OutputLayer);
        assert!(r.to_csv().starts_with("block_label,mean_abs_change\ntoken-embedding,0e0"));
    }

    #[test]
    fn mean_change_per_block() {
        let m = build_model(&ModelConfig::toy(), 1).unwrap();
        let a = Checkpoint::from_store(&m.store);
        let mut b = a.clone();
        let e = b.entries.iter_mut().find(|e| e.id == "final_logits_bias").unwrap();
        e.values[0] += 0.5;
        e.values[1] -= 0.5;
        let r = drift_report(&a, &b).unwrap();
        assert_eq!(r.support(), vec![BlockLabel::OutputLayer]);
        assert!((r.get(BlockLabel::OutputLayer).unwrap() - 1.0 / 512.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_checkpoints_rejected() {
        let m = build_model(&ModelConfig::toy(), 1).unwrap();
        let a = Checkpoint::from_store(&m.store);
        let mut b = a.clone();
        b.entries.pop();
        assert!(drift_report(&a, &b).is_err());
    }
}
