//! Project-specific customization of a small encoder-decoder code model.

pub mod compute;
pub mod corpus;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod tuning;
