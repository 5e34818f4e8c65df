//! Attention synthesizers, the shared attend step, the multi-head wrapper
//! and the analytic cost model.

pub mod cost;
pub mod layer;
pub mod spec;
pub mod synth;

pub use cost::{cost_table_csv, flop_count, CostRow};
pub use layer::{attend, AttentionOutput, HeadParams, MultiHeadAttention};
pub use spec::{balanced_factors, parse_variant, SynthKind, SynthesizerSpec, VariantDefaults};
pub use synth::{
    dense_logits, dot_product_logits, factorized_dense_logits, factorized_random_logits, mixture_logits,
    random_logits, SynthParams,
};
