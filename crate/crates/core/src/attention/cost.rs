//! Analytic cost model for one attention layer.
//!
//! Counting convention, for a single sequence (batch 1) of length `L`:
//!
//! * a product of `m×k` and `k×n` matrices costs `2·m·k·n` FLOPs (one
//!   multiply-add is two FLOPs);
//! * ReLU costs 1 FLOP per element;
//! * row softmax costs [`SOFTMAX_FLOPS`] per element (max, subtract+exp,
//!   sum, divide);
//! * scaling costs 1 FLOP per element; elementwise products 1 per element;
//! * slicing, tiling and copying are free.
//!
//! Per head (`d_h = d / heads`) the layer pays the head's logits, the masked
//! softmax (`4·L²`), the value projection (`2·L·d·d_h`) and the weighted sum
//! of values (`2·L²·d_h`). The output projection adds `2·L·d²` once.

use serde::Serialize;

use super::spec::{SynthKind, SynthesizerSpec};

pub const SOFTMAX_FLOPS: u64 = 4;

fn logits_flops(kind: &SynthKind, l: u64, d: u64, dh: u64, n: u64) -> u64 {
    match kind {
        SynthKind::DotProduct { scaled } => {
            2 * (2 * l * d * dh) + 2 * l * l * dh + if *scaled { l * l } else { 0 }
        }
        SynthKind::Dense => 2 * l * d * d + l * d + 2 * l * d * l,
        SynthKind::FactorizedDense { a, b } => {
            let (a, b) = (*a as u64, *b as u64);
            2 * l * d * d + l * d + 2 * l * d * (a + b) + l * n
        }
        SynthKind::Random { .. } => 0,
        SynthKind::FactorizedRandom { k } => 2 * l * (*k as u64) * l,
        SynthKind::Mixture { members, .. } => {
            let m = members.len() as u64;
            members
                .iter()
                .map(|k| logits_flops(k, l, d, dh, n))
                .sum::<u64>()
                + 2 * m * l * l
                + SOFTMAX_FLOPS * m
        }
    }
}

/// FLOPs of one forward pass (logits + attend + output projection) of a
/// multi-head layer, under the convention in the module docs.
pub fn flop_count(spec: &SynthesizerSpec, len: usize, d: usize, heads: usize) -> u64 {
    let (l, d64) = (len as u64, d as u64);
    let heads = heads.max(1) as u64;
    let dh = d64 / heads;
    let n = spec.max_len as u64;
    let per_head = logits_flops(&spec.kind, l, d64, dh, n) + SOFTMAX_FLOPS * l * l + 2 * l * d64 * dh + 2 * l * l * dh;
    heads * per_head + 2 * l * d64 * d64
}

/// One row of the exported cost table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CostRow {
    pub variant: String,
    pub d: usize,
    pub n: usize,
    pub k: Option<usize>,
    pub params: usize,
    pub flops: u64,
}

impl CostRow {
    /// Per-head parameter count and full-length (`L = N`) FLOPs.
    pub fn new(spec: &SynthesizerSpec, heads: usize) -> Self {
        let k = match &spec.kind {
            SynthKind::FactorizedRandom { k } => Some(*k),
            SynthKind::Mixture { members, .. } => members.iter().find_map(|m| match m {
                SynthKind::FactorizedRandom { k } => Some(*k),
                _ => None,
            }),
            _ => None,
        };
        Self {
            variant: spec.kind.name(),
            d: spec.model_dim,
            n: spec.max_len,
            k,
            params: spec.param_count(),
            flops: flop_count(spec, spec.max_len, spec.model_dim, heads),
        }
    }
}

pub const COST_CSV_HEADER: &str = "variant,d,N,k,params,flops";

/// Cost table as CSV with header `variant,d,N,k,params,flops`; `k` is empty
/// for variants without a rank.
pub fn cost_table_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.variant, r.d, r.n, k, r.params, r.flops
        ));
    }
    out
}
