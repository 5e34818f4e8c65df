//! Text exports for attention analysis.
//!
//! Heatmaps are CSV: one query row per line, comma separated, `\n` line
//! endings, each weight written as `0` when it is exactly zero and as
//! `{:.8e}` (nine significant digits) otherwise. Histograms are a JSON array
//! of [`HistogramExport`] records.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::SynthKind;
use crate::error::ModelError;
use crate::forward::{AttentionRecord, AttentionRole};
use crate::model::{Batch, Model};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("no {role} attention at layer {layer} (model has {layers} layers)")]
    NoLayer {
        role: &'static str,
        layer: usize,
        layers: usize,
    },
    #[error("{what} {index} out of range (have {count})")]
    OutOfRange {
        what: &'static str,
        index: usize,
        count: usize,
    },
    #[error("histograms need at least 2 bins, got {0}")]
    Bins(usize),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

type Result<T> = std::result::Result<T, ExportError>;

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| ExportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// File-name-safe variant tag: `mixture(random+dense)` → `mixture_random_dense`.
pub fn variant_tag(kind: &SynthKind) -> String {
    let raw: String = kind
        .name()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    raw.split('_').filter(|s| !s.is_empty()).collect::<Vec<_>>().join("_")
}

pub fn attention_file_name(role: AttentionRole, layer: usize, head: usize, kind: &SynthKind) -> String {
    format!("attn_{}_l{layer}_h{head}_{}.csv", role.as_str(), variant_tag(kind))
}

fn format_weight(w: f64) -> String {
    if w == 0.0 {
        "0".into()
    } else {
        format!("{w:.8e}")
    }
}

/// CSV of one `(sample, head)` slice of a `[batch, heads, L, L_keys]`
/// weight tensor.
pub fn weights_csv<T: Scalar>(weights: &crate::tensor::Tensor<T>, sample: usize, head: usize) -> Result<String> {
    let shape = weights.shape();
    let (b, h, l, lk) = (shape[0], shape[1], shape[2], shape[3]);
    if sample >= b {
        return Err(ExportError::OutOfRange {
            what: "sample",
            index: sample,
            count: b,
        });
    }
    if head >= h {
        return Err(ExportError::OutOfRange {
            what: "head",
            index: head,
            count: h,
        });
    }
    let base = (sample * h + head) * l * lk;
    let data = weights.data();
    let mut out = String::with_capacity(l * lk * 16);
    for q in 0..l {
        let row = &data[base + q * lk..base + (q + 1) * lk];
        let cells: Vec<String> = row.iter().map(|w| format_weight(w.to_f64_lossy())).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// Parses a heatmap CSV back into rows.
pub fn parse_csv(text: &str) -> std::result::Result<Vec<Vec<f64>>, std::num::ParseFloatError> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::parse).collect())
        .collect()
}

fn role_kind<T>(model: &Model<T>, role: AttentionRole) -> &SynthKind {
    match role {
        AttentionRole::EncoderSelf => &model.config.encoder_attn,
        AttentionRole::DecoderSelf => &model.config.decoder_attn,
        AttentionRole::DecoderCross => &model.config.cross_attn,
    }
}

fn find_record<T: Scalar>(
    records: &[AttentionRecord<T>],
    role: AttentionRole,
    layer: usize,
) -> Result<&AttentionRecord<T>> {
    records
        .iter()
        .find(|r| r.role == role && r.layer == layer)
        .ok_or_else(|| ExportError::NoLayer {
            role: role.as_str(),
            layer,
            layers: records.iter().filter(|r| r.role == role).count(),
        })
}

/// Heatmap of `(role, layer, head)` for one sample of `batch`, as CSV text.
pub fn attention_csv<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    role: AttentionRole,
    layer: usize,
    head: usize,
    sample: usize,
) -> Result<String> {
    let (_, records) = model.infer(batch, true)?;
    weights_csv(&find_record(&records, role, layer)?.weights, sample, head)
}

/// Writes the heatmap into `dir` and returns the file path.
pub fn export_attention<T: Scalar>(
    model: &Model<T>,
    batch: &Batch,
    role: AttentionRole,
    layer: usize,
    head: usize,
    sample: usize,
    dir: &Path,
) -> Result<PathBuf> {
    let csv = attention_csv(model, batch, role, layer, head, sample)?;
    let path = dir.join(attention_file_name(role, layer, head, role_kind(model, role)));
    write(&path, &csv)?;
    Ok(path)
}

/// Distribution of one head's attention weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramExport {
    pub layer: usize,
    pub head: usize,
    pub role: AttentionRole,
    pub step: u64,
    /// `bins + 1` uniform edges over `[0, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

fn bin_of(w: f64, bins: usize) -> usize {
    ((w.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1)
}

/// Self-attention weight histograms, one record per `(role, layer, head)`,
/// summed over every entry of every batch. Bins are half-open `[e_i,
/// e_{i+1})` except the last, which includes 1.
pub fn histograms<T: Scalar>(model: &Model<T>, batches: &[Batch], bins: usize, step: u64) -> Result<Vec<HistogramExport>> {
    if bins < 2 {
        return Err(ExportError::Bins(bins));
    }
    let edges: Vec<f64> = (0..=bins).map(|i| i as f64 / bins as f64).collect();
    let mut out: Vec<HistogramExport> = Vec::new();
    for batch in batches {
        let (_, records) = model.infer(batch, true)?;
        for rec in records.iter().filter(|r| r.role != AttentionRole::DecoderCross) {
            let shape = rec.weights.shape();
            let (b, h, per) = (shape[0], shape[1], shape[2] * shape[3]);
            for head in 0..h {
                let idx = match out
                    .iter()
                    .position(|e| e.role == rec.role && e.layer == rec.layer && e.head == head)
                {
                    Some(i) => i,
                    None => {
                        out.push(HistogramExport {
                            layer: rec.layer,
                            head,
                            role: rec.role,
                            step,
                            edges: edges.clone(),
                            counts: vec![0; bins],
                        });
                        out.len() - 1
                    }
                };
                let counts = &mut out[idx].counts;
                for s in 0..b {
                    let base = (s * h + head) * per;
                    for w in &rec.weights.data()[base..base + per] {
                        counts[bin_of(w.to_f64_lossy(), bins)] += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn export_histogram<T: Scalar>(model: &Model<T>, batches: &[Batch], bins: usize, step: u64, path: &Path) -> Result<Vec<HistogramExport>> {
    let records = histograms(model, batches, bins, step)?;
    let json = serde_json::to_string_pretty(&records).expect("histograms serialize");
    write(path, &(json + "\n"))?;
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelMode};
    use crate::task::{Split, Task, TaskKind};

    fn setup(kind: SynthKind, mode: ModelMode) -> (Model<f64>, Task) {
        let task = Task::new(TaskKind::Copy, 5, 4, 3).unwrap();
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: task.model_vocab(),
            max_len: 8,
            ..ModelConfig::new(mode, kind)
        };
        (Model::new(cfg, 9).unwrap(), task)
    }

    fn batch(task: &Task, mode: ModelMode, start: usize) -> Batch {
        task.batch(mode, &task.generate(Split::Val, start, 3)).unwrap()
    }

    #[test]
    fn tags_are_file_safe() {
        let mix = SynthKind::Mixture {
            members: vec![SynthKind::Random { trainable: true }, SynthKind::Dense],
            learnable_weights: true,
        };
        assert_eq!(variant_tag(&mix), "mixture_random_dense");
        assert_eq!(
            attention_file_name(AttentionRole::DecoderSelf, 1, 3, &SynthKind::Dense),
            "attn_decoder_self_l1_h3_dense.csv"
        );
    }

    #[test]
    fn rows_sum_to_one_and_future_is_exact_zero() {
        let (model, task) = setup(SynthKind::Dense, ModelMode::Decoder);
        let b = batch(&task, ModelMode::Decoder, 0);
        let csv = attention_csv(&model, &b, AttentionRole::DecoderSelf, 1, 1, 2).unwrap();
        assert!(!csv.contains('\r'));
        for (q, line) in csv.lines().enumerate() {
            let cells: Vec<&str> = line.split(',').collect();
            assert_eq!(cells.len(), 8);
            for cell in &cells[q + 1..] {
                assert_eq!(*cell, "0");
            }
            let sum: f64 = cells.iter().map(|c| c.parse::<f64>().unwrap()).sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn random_exports_ignore_the_batch() {
        let (model, task) = setup(SynthKind::Random { trainable: true }, ModelMode::Encoder);
        let a = attention_csv(&model, &batch(&task, ModelMode::Encoder, 0), AttentionRole::EncoderSelf, 0, 0, 0).unwrap();
        let b = attention_csv(&model, &batch(&task, ModelMode::Encoder, 3), AttentionRole::EncoderSelf, 0, 0, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn range_errors() {
        let (model, task) = setup(SynthKind::Dense, ModelMode::Decoder);
        let b = batch(&task, ModelMode::Decoder, 0);
        let role = AttentionRole::DecoderSelf;
        assert!(matches!(attention_csv(&model, &b, role, 2, 0, 0), Err(ExportError::NoLayer { .. })));
        assert!(matches!(attention_csv(&model, &b, role, 0, 2, 0), Err(ExportError::OutOfRange { what: "head", .. })));
        assert!(matches!(attention_csv(&model, &b, role, 0, 0, 3), Err(ExportError::OutOfRange { what: "sample", .. })));
        assert!(matches!(histograms(&model, &[b], 1, 0), Err(ExportError::Bins(1))));
    }

    #[test]
    fn histogram_conserves_entries() {
        let (model, task) = setup(SynthKind::FactorizedRandom { k: 2 }, ModelMode::EncDec);
        let batches = [batch(&task, ModelMode::EncDec, 0), batch(&task, ModelMode::EncDec, 3)];
        let hs = histograms(&model, &batches, 50, 12).unwrap();
        // two stacks × two layers × two heads; cross-attention excluded
        assert_eq!(hs.len(), 8);
        for h in &hs {
            assert_eq!(h.counts.iter().sum::<u64>(), 2 * 3 * 4 * 4);
            assert_eq!(h.edges.len(), 51);
            assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
            assert_eq!((h.edges[0], h.edges[50]), (0.0, 1.0));
            assert_eq!(h.step, 12);
        }
    }

    #[test]
    fn uniform_attention_lands_in_one_bin() {
        let (mut model, task) = setup(SynthKind::Random { trainable: true }, ModelMode::Encoder);
        for p in model.store.iter_mut() {
            if p.name.ends_with(".r") {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
        let hs = histograms(&model, &[batch(&task, ModelMode::Encoder, 0)], 50, 0).unwrap();
        let bin = bin_of(0.25, 50);
        for h in hs {
            assert_eq!(h.counts[bin], 3 * 16);
        }
    }
}
