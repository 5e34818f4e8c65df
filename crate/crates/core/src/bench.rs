//! Wall-clock latency of single attention layers, paired with the analytic
//! FLOP count.
//!
//! Each measurement builds one multi-head self-attention layer with
//! `max_len = L`, runs it on a batch of one random `[1, L, d]` input, and
//! reports the median over `reps` timed runs after `warmup` untimed ones.

use std::time::Instant;

use serde::Serialize;

use crate::attention::{flop_count, parse_variant, MultiHeadAttention, SynthesizerSpec, VariantDefaults};
use crate::error::ModelError;
use crate::forward::{AttentionRole, Forward};
use crate::params::ParamStore;
use crate::rng::{seeded_init, Init};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub d_model: usize,
    pub heads: usize,
    pub lens: Vec<usize>,
    /// Timed repetitions per point; at least 3.
    pub reps: usize,
    /// Untimed leading runs.
    pub warmup: usize,
    /// Time forward plus backward instead of forward alone.
    pub backward: bool,
    /// Rank of factorized-random heads; `None` uses the default for `L`.
    pub rank: Option<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            lens: vec![64, 128, 256, 512],
            reps: 5,
            warmup: 2,
            backward: false,
            rank: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub variant: String,
    pub len: usize,
    pub d: usize,
    pub heads: usize,
    pub params: usize,
    pub flops: u64,
    pub median_secs: f64,
    pub reps: usize,
}

/// Median of `samples` after dropping the first `warmup` entries.
pub fn median_after_warmup(samples: &[f64], warmup: usize) -> f64 {
    let mut kept: Vec<f64> = samples.iter().skip(warmup).copied().collect();
    if kept.is_empty() {
        return f64::NAN;
    }
    kept.sort_by(f64::total_cmp);
    let mid = kept.len() / 2;
    if kept.len() % 2 == 1 {
        kept[mid]
    } else {
        0.5 * (kept[mid - 1] + kept[mid])
    }
}

fn measure<T: Scalar>(variant: &str, len: usize, cfg: &BenchConfig) -> Result<BenchRow, ModelError> {
    let mut defaults = VariantDefaults::for_max_len(len);
    if let Some(k) = cfg.rank {
        defaults.k = k;
    }
    let kind = parse_variant(variant, &defaults)?;
    let mut store = ParamStore::<T>::new(cfg.seed);
    let layer = MultiHeadAttention::build(&mut store, "bench", kind.clone(), len, cfg.d_model, cfg.heads, None)?;
    let spec = SynthesizerSpec::new(kind.clone(), len, cfg.d_model, cfg.d_model / cfg.heads)?;
    let input = seeded_init::<T>(Init::Gaussian { std: 1.0 }, &[1, len, cfg.d_model], cfg.seed, 7)?;

    let mut samples = Vec::with_capacity(cfg.warmup + cfg.reps);
    for _ in 0..cfg.warmup + cfg.reps {
        let start = Instant::now();
        let mut f = Forward::new(&store);
        let x = f.tape.leaf(input.clone(), false);
        let out = layer.forward(&mut f, x, None, AttentionRole::EncoderSelf, 0)?;
        if cfg.backward {
            let total = f.tape.sum(out.output)?;
            std::hint::black_box(f.backward(total)?);
        } else {
            std::hint::black_box(f.tape.value(out.output));
        }
        samples.push(start.elapsed().as_secs_f64());
    }
    Ok(BenchRow {
        variant: kind.name(),
        len,
        d: cfg.d_model,
        heads: cfg.heads,
        params: store.scalar_count(),
        flops: flop_count(&spec, len, cfg.d_model, cfg.heads),
        median_secs: median_after_warmup(&samples, cfg.warmup),
        reps: cfg.reps,
    })
}

/// One row per `(variant, L)`, variants outermost.
pub fn bench<T: Scalar>(variants: &[&str], cfg: &BenchConfig) -> Result<Vec<BenchRow>, ModelError> {
    if cfg.reps < 3 {
        return Err(ModelError::Config(format!("bench needs at least 3 repetitions, got {}", cfg.reps)));
    }
    let mut rows = Vec::with_capacity(variants.len() * cfg.lens.len());
    for v in variants {
        for &len in &cfg.lens {
            rows.push(measure::<T>(v, len, cfg)?);
        }
    }
    Ok(rows)
}

pub const BENCH_CSV_HEADER: &str = "variant,len,d,heads,params,flops,median_secs,reps";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{:.6e},{}\n",
            r.variant, r.len, r.d, r.heads, r.params, r.flops, r.median_secs, r.reps
        ));
    }
    out
}
