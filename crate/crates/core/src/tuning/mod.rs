//! Customization strategies: freeze plans, prefix banks and parameter drift.

mod drift;
mod plan;
mod prefix;

pub use drift::{drift_report, DriftReport};
pub use plan::{apply_freeze_plan, make_freeze_plan, FreezePlan, StrategyKind};
pub use prefix::{attach_prefix, frequent_words, init_prefix, init_prefix_from_counts, PrefixBank, DEFAULT_PREFIX_LENGTH};

use crate::model::ModelError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TuningError {
    #[error("unknown block label {0}")]
    UnknownBlock(String),
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("prefix dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("checkpoints differ: {0}")]
    RegistryMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, TuningError>;
