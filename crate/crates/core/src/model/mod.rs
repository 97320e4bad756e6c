//! Models built from (optionally branch-augmented) projections.

mod mlp;
mod transformer;

pub use mlp::{MlpConfig, RegressionNet};
pub use transformer::{ParamCounts, Transformer, TransformerConfig};
