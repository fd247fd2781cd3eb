//! Encoder-decoder transformer: configuration, parameter census, training
//! forward pass, cached inference and beam search.

mod beam;
mod census;
mod config;
mod infer;
mod transformer;

pub use beam::{beam_search, greedy_search, BeamHypothesis, StepModel};
pub use census::{
    count_parameters, parameter_layout, prefix_parameter_count, Init, ParamCount, ParamSpec, ParameterRegistry,
    RegistryEntry,
};
pub(crate) use census::BlockSizes;
pub use config::ModelConfig;
pub use infer::{DecoderState, EncoderMemory, ModelStepper};
pub use transformer::{build_model, LossOutput, Seq2Seq};
pub(crate) use transformer::prefix_param_name;

use crate::tensor::TensorError;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids before the byte tokens.
pub const NUM_SPECIAL: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("unknown block label {0}")]
    UnknownBlock(String),
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence of length {len} exceeds max_positions {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("empty {0} sequence")]
    EmptySequence(&'static str),
    #[error("beam width must be at least 1")]
    ZeroBeamWidth,
    #[error("prefix mismatch: {0}")]
    PrefixMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;
