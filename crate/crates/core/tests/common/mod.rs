//! Test-only helpers: a straight-line Transformer reference built on
//! nalgebra matrices, independent of the tape.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use synth_core::model::{Model, ModelConfig, ModelMode, Tokens};
use synth_core::ParamStore;

pub fn mat(store: &ParamStore, name: &str) -> DMatrix<f64> {
    let p = store.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    let s = p.value.shape();
    let (r, c) = if s.len() == 1 { (1, s[0]) } else { (s[0], s[1]) };
    DMatrix::from_row_slice(r, c, p.value.data())
}

pub fn vec_param(store: &ParamStore, name: &str) -> DVector<f64> {
    DVector::from_column_slice(store.by_name(name).unwrap().value.data())
}

fn layer_norm(x: &DMatrix<f64>, g: &DVector<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * g[j] + b[j];
        }
    }
    out
}

fn softmax_rows(s: &mut DMatrix<f64>, allowed: impl Fn(usize, usize) -> bool) {
    for i in 0..s.nrows() {
        let m = (0..s.ncols())
            .filter(|&j| allowed(i, j))
            .map(|j| s[(i, j)])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..s.ncols() {
            let e = if allowed(i, j) { (s[(i, j)] - m).exp() } else { 0.0 };
            s[(i, j)] = e;
            z += e;
        }
        for j in 0..s.ncols() {
            s[(i, j)] /= z;
        }
    }
}

/// Vocabulary logits of one sequence through a pre-norm dot-product
/// Transformer (decoder or encoder mode), reading weights by name.
///
/// `head_prefix(layer, head)` names the parameter group holding `w_q`/`w_k`.
pub fn reference_logits(
    store: &ParamStore,
    cfg: &ModelConfig,
    ids: &[u32],
    head_prefix: impl Fn(usize, usize) -> String,
) -> DMatrix<f64> {
    let (stack, causal) = match cfg.mode {
        ModelMode::Decoder => ("dec", true),
        ModelMode::Encoder => ("enc", false),
        ModelMode::EncDec => panic!("reference covers single-stack models"),
    };
    let len = ids.len();
    let d = cfg.d_model;
    let dh = d / cfg.heads;
    let tok = mat(store, "tok_emb");
    let pos = mat(store, "pos_emb");
    let mut x = DMatrix::zeros(len, d);
    for (i, &t) in ids.iter().enumerate() {
        for j in 0..d {
            x[(i, j)] = tok[(t as usize, j)] + pos[(i, j)];
        }
    }
    let valid: Vec<bool> = ids.iter().map(|&t| t != 0).collect();
    for l in 0..cfg.layers {
        let p = format!("{stack}.layer{l}");
        let h = layer_norm(&x, &vec_param(store, &format!("{p}.ln_self.g")), &vec_param(store, &format!("{p}.ln_self.b")));
        let mut cat = DMatrix::zeros(len, d);
        for head in 0..cfg.heads {
            let hp = head_prefix(l, head);
            let q = &h * mat(store, &format!("{hp}.w_q"));
            let k = &h * mat(store, &format!("{hp}.w_k"));
            let mut s = (&q * k.transpose()) / (dh as f64).sqrt();
            softmax_rows(&mut s, |i, j| valid[j] && (!causal || j <= i));
            let v = &h * mat(store, &format!("{p}.self.head{head}.w_g"));
            let y = s * v;
            cat.columns_mut(head * dh, dh).copy_from(&y);
        }
        x += cat * mat(store, &format!("{p}.self.w_o"));
        let h = layer_norm(&x, &vec_param(store, &format!("{p}.ln_ffn.g")), &vec_param(store, &format!("{p}.ln_ffn.b")));
        let mut a = &h * mat(store, &format!("{p}.ffn.w1"));
        let b1 = vec_param(store, &format!("{p}.ffn.b1"));
        for mut row in a.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v + b1[j]).max(0.0);
            }
        }
        let mut y = a * mat(store, &format!("{p}.ffn.w2"));
        let b2 = vec_param(store, &format!("{p}.ffn.b2"));
        for mut row in y.row_iter_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v += b2[j];
            }
        }
        x += y;
    }
    let x = layer_norm(
        &x,
        &vec_param(store, &format!("{stack}.ln_f.g")),
        &vec_param(store, &format!("{stack}.ln_f.b")),
    );
    let mut out = x * mat(store, "out.w");
    let ob = vec_param(store, "out.b");
    for mut row in out.row_iter_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += ob[j];
        }
    }
    out
}

/// Largest elementwise gap between the model's logits and the reference,
/// over every sequence of `tokens`.
pub fn max_gap_to_reference(
    model: &Model<f64>,
    tokens: &Tokens,
    head_prefix: impl Fn(usize, usize) -> String + Copy,
) -> f64 {
    let batch = synth_core::model::Batch {
        src: None,
        input: tokens.clone(),
        targets: vec![0; tokens.ids.len()],
        target_mask: vec![true; tokens.ids.len()],
    };
    let (logits, _) = model.infer(&batch, false).unwrap();
    let v = model.config.vocab;
    let mut worst: f64 = 0.0;
    for b in 0..tokens.batch {
        let r = reference_logits(&model.store, &model.config, tokens.row(b), head_prefix);
        for i in 0..tokens.len {
            for j in 0..v {
                let got = logits.data()[(b * tokens.len + i) * v + j];
                worst = worst.max((got - r[(i, j)]).abs());
            }
        }
    }
    worst
}

/// Tokens drawn uniformly from `1..vocab` (no padding).
pub fn random_tokens(seed: u64, batch: usize, len: usize, vocab: usize) -> Tokens {
    use rand::Rng;
    let mut rng = synth_core::rng::named_rng(seed, "tokens");
    let ids = (0..batch * len).map(|_| rng.random_range(1..vocab as u32)).collect();
    Tokens::new(batch, len, ids).unwrap()
}
