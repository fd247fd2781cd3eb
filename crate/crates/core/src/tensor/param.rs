use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Result, Tensor, TensorError};

/// Architectural block a parameter belongs to.
///
/// The derived ordering is the plotting order used by drift reports:
/// embeddings, encoder blocks, decoder blocks, output layer, prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum BlockLabel {
    TokenEmbedding,
    PositionalEmbedding,
    EncoderBlock(usize),
    DecoderBlock(usize),
    OutputLayer,
    Prefix,
}

impl fmt::Display for BlockLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockLabel::TokenEmbedding => f.write_str("token-embedding"),
            BlockLabel::PositionalEmbedding => f.write_str("positional-embedding"),
            BlockLabel::EncoderBlock(i) => write!(f, "encoder-block[{i}]"),
            BlockLabel::DecoderBlock(i) => write!(f, "decoder-block[{i}]"),
            BlockLabel::OutputLayer => f.write_str("output-layer"),
            BlockLabel::Prefix => f.write_str("prefix"),
        }
    }
}

impl FromStr for BlockLabel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let indexed = |prefix: &str| -> Option<usize> {
            s.strip_prefix(prefix)?.strip_suffix(']')?.parse().ok()
        };
        match s {
            "token-embedding" => Ok(BlockLabel::TokenEmbedding),
            "positional-embedding" => Ok(BlockLabel::PositionalEmbedding),
            "output-layer" => Ok(BlockLabel::OutputLayer),
            "prefix" => Ok(BlockLabel::Prefix),
            _ => {
                if let Some(i) = indexed("encoder-block[") {
                    Ok(BlockLabel::EncoderBlock(i))
                } else if let Some(i) = indexed("decoder-block[") {
                    Ok(BlockLabel::DecoderBlock(i))
                } else {
                    Err(format!("unknown block label `{s}`"))
                }
            }
        }
    }
}

impl TryFrom<String> for BlockLabel {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<BlockLabel> for String {
    fn from(b: BlockLabel) -> String {
        b.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub id: String,
    pub block: BlockLabel,
    pub tensor: Tensor,
    frozen: bool,
}

impl Parameter {
    pub fn new(id: impl Into<String>, block: BlockLabel, tensor: Tensor) -> Self {
        Self {
            id: id.into(),
            block,
            tensor,
            frozen: false,
        }
    }

    pub fn frozen(&self) -> bool {
        self.frozen
    }

    /// Freezing drops any gradient buffer.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        if frozen {
            *self.tensor.grad_mut() = None;
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    pub(crate) fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert!(!self.frozen);
        match self.tensor.grad_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, v)| *b += v),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

/// Ordered collection of parameters with id lookup.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) -> Result<ParamId> {
        if self.index.contains_key(&param.id) {
            return Err(TensorError::DuplicateParameter(param.id));
        }
        let id = self.params.len();
        self.index.insert(param.id.clone(), id);
        self.params.push(param);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    pub fn trainable_elements(&self) -> usize {
        self.params
            .iter()
            .filter(|p| !p.frozen)
            .map(Parameter::numel)
            .sum()
    }

    /// Number of f64 slots currently allocated for gradients.
    pub fn gradient_elements(&self) -> usize {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad().map(<[f64]>::len))
            .sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            *p.tensor.grad_mut() = None;
        }
    }

    pub fn set_frozen_where(&mut self, mut pred: impl FnMut(&Parameter) -> bool) {
        for p in &mut self.params {
            let f = pred(p);
            p.set_frozen(f);
        }
    }
}
