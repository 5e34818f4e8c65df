//! Independent straight-line oracles for the synthesizing functions, the
//! multi-head wrapper, the loss and the full model.

mod common;

use nalgebra::DMatrix;
use synth_core::attention::{
    dense_logits, dot_product_logits, factorized_dense_logits, factorized_random_logits, mixture_logits,
    MultiHeadAttention,
};
use synth_core::forward::{AttentionRole, Forward};
use synth_core::model::{loss, Model, ModelConfig, ModelMode};
use synth_core::rng::{seeded_init, Init};
use synth_core::tensor::Tensor;
use synth_core::{ParamStore, SynthKind, Tape};

fn gaussian(shape: &[usize], seed: u64) -> Tensor<f64> {
    seeded_init(Init::Gaussian { std: 1.0 }, shape, seed, 0).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "entry {i}: {x} vs {y}");
    }
}

/// `x[b, i, :] · w` with explicit loops.
fn row_times(x: &Tensor<f64>, b: usize, i: usize, w: &Tensor<f64>) -> Vec<f64> {
    let (d, n) = (w.shape()[0], w.shape()[1]);
    (0..n)
        .map(|j| (0..d).map(|p| x.at(&[b, i, p]) * w.at(&[p, j])).sum())
        .collect()
}

#[test]
fn dense_matches_loop_oracle() {
    let (b, l, d, n) = (2, 3, 4, 5);
    let x = gaussian(&[b, l, d], 1);
    let w1 = gaussian(&[d, d], 2);
    let w2 = gaussian(&[d, n], 3);
    let mut tape = Tape::new();
    let (xv, w1v, w2v) = (tape.constant(x.clone()), tape.constant(w1.clone()), tape.constant(w2.clone()));
    let out = dense_logits(&mut tape, xv, w1v, w2v).unwrap();
    assert_eq!(tape.shape(out), &[b, l, l]);
    let mut want = Vec::new();
    for bi in 0..b {
        for i in 0..l {
            let h: Vec<f64> = row_times(&x, bi, i, &w1).into_iter().map(|v| v.max(0.0)).collect();
            for j in 0..l {
                want.push((0..d).map(|p| h[p] * w2.at(&[p, j])).sum());
            }
        }
    }
    close(tape.value(out).data(), &want, 1e-12);
}

#[test]
fn factorized_dense_matches_loop_oracle() {
    let (b, l, d, fa, fb) = (2, 5, 4, 2, 3);
    let x = gaussian(&[b, l, d], 4);
    let w1 = gaussian(&[d, d], 5);
    let wa = gaussian(&[d, fa], 6);
    let wb = gaussian(&[d, fb], 7);
    let mut tape = Tape::new();
    let vars = [&x, &w1, &wa, &wb].map(|t| tape.constant(t.clone()));
    let out = factorized_dense_logits(&mut tape, vars[0], vars[1], vars[2], vars[3]).unwrap();
    assert_eq!(tape.shape(out), &[b, l, l]);
    let mut want = Vec::new();
    for bi in 0..b {
        for i in 0..l {
            let h: Vec<f64> = row_times(&x, bi, i, &w1).into_iter().map(|v| v.max(0.0)).collect();
            let a: Vec<f64> = (0..fa).map(|q| (0..d).map(|p| h[p] * wa.at(&[p, q])).sum()).collect();
            let bb: Vec<f64> = (0..fb).map(|q| (0..d).map(|p| h[p] * wb.at(&[p, q])).sum()).collect();
            // column c pairs A[c / b] with B[c % b]
            for c in 0..l {
                want.push(a[c / fb] * bb[c % fb]);
            }
        }
    }
    close(tape.value(out).data(), &want, 1e-12);
}

#[test]
fn factorized_dense_tiling_example() {
    // A=[1,2], B=[10,100] via identity projections of a one-token input
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(&[1, 1, 2], &[1.0, 2.0]).unwrap());
    let w1 = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let wa = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let wb = tape.constant(Tensor::from_rows(&[&[10.0, 0.0], &[0.0, 50.0]]).unwrap());
    let h = tape.matmul(x, w1).unwrap();
    let a = tape.matmul(h, wa).unwrap();
    let b = tape.matmul(h, wb).unwrap();
    assert_eq!(tape.value(b).data(), &[10.0, 100.0]);
    let ta = tape.tile_block(a, 2).unwrap();
    let tb = tape.tile_cyclic(b, 2).unwrap();
    let c = tape.mul(ta, tb).unwrap();
    assert_eq!(tape.value(c).data(), &[10.0, 100.0, 20.0, 200.0]);
}

#[test]
fn factorized_dense_with_unit_b_is_single_projection() {
    // a = N, b = 1. Positive rows summing to 1 with W₁ = I and W_B = 1
    // make B ≡ 1, leaving relu(X) W_A.
    let (l, d) = (4, 3);
    let raw = [1.0, 0.5, 2.0, 0.3, 1.5, 0.7, 2.2, 0.1, 0.9, 1.1, 1.3, 0.4];
    let rows: Vec<f64> = raw
        .chunks(d)
        .flat_map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(move |v| v / s)
        })
        .collect();
    let eye = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(&[1, l, d], &rows).unwrap());
    let w1 = tape.constant(Tensor::from_f64(&[d, d], &eye).unwrap());
    let wa = tape.constant(gaussian(&[d, l], 8));
    let ones = tape.constant(Tensor::full(&[d, 1], 1.0).unwrap());
    let fd = factorized_dense_logits(&mut tape, x, w1, wa, ones).unwrap();
    let single = tape.matmul(x, wa).unwrap();
    close(tape.value(fd).data(), tape.value(single).data(), 1e-12);
}

#[test]
fn dot_product_matches_loop_oracle() {
    let (b, l, d, dh) = (2, 4, 5, 3);
    let x = gaussian(&[b, l, d], 9);
    let wq = gaussian(&[d, dh], 10);
    let wk = gaussian(&[d, dh], 11);
    let mut tape = Tape::new();
    let (xv, q, k) = (tape.constant(x.clone()), tape.constant(wq.clone()), tape.constant(wk.clone()));
    let scale = 1.0 / (dh as f64).sqrt();
    let out = dot_product_logits(&mut tape, xv, xv, q, k, Some(scale)).unwrap();
    let mut want = Vec::new();
    for bi in 0..b {
        for i in 0..l {
            let qi = row_times(&x, bi, i, &wq);
            for j in 0..l {
                let kj = row_times(&x, bi, j, &wk);
                want.push(qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() * scale);
            }
        }
    }
    close(tape.value(out).data(), &want, 1e-12);
}

#[test]
fn dot_product_identity_weights_on_one_hot_rows() {
    let d = 4;
    let eye: Vec<f64> = (0..d * d).map(|i| if i % (d + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::from_f64(&[1, d, d], &eye).unwrap());
    let w = tape.constant(Tensor::from_f64(&[d, d], &eye).unwrap());
    let out = dot_product_logits(&mut tape, x, x, w, w, Some(0.5)).unwrap();
    let want: Vec<f64> = eye.iter().map(|v| v * 0.5).collect();
    assert_eq!(tape.value(out).data(), &want[..]);
}

#[test]
fn dot_product_is_permutation_equivariant() {
    let (l, d) = (5, 3);
    let x = gaussian(&[1, l, d], 12);
    let perm = [3usize, 0, 4, 1, 2];
    let mut px = Vec::new();
    for &p in &perm {
        px.extend((0..d).map(|j| x.at(&[0, p, j])));
    }
    let xp = Tensor::from_f64(&[1, l, d], &px).unwrap();
    let wq = gaussian(&[d, d], 13);
    let wk = gaussian(&[d, d], 14);
    let run = |x: Tensor<f64>| {
        let mut tape = Tape::new();
        let (xv, q, k) = (tape.constant(x), tape.constant(wq.clone()), tape.constant(wk.clone()));
        let out = dot_product_logits(&mut tape, xv, xv, q, k, None).unwrap();
        tape.value(out).clone()
    };
    let (a, b) = (run(x), run(xp));
    for i in 0..l {
        for j in 0..l {
            assert!((b.at(&[0, i, j]) - a.at(&[0, perm[i], perm[j]])).abs() < 1e-12);
        }
    }
}

#[test]
fn factorized_random_full_rank_identity_factor() {
    // k = N lies outside the validated range; the logit function itself
    // accepts it, and R₂ = I reproduces R₁.
    let n = 4;
    let r1 = gaussian(&[n, n], 15);
    let eye: Vec<f64> = (0..n * n).map(|i| if i % (n + 1) == 0 { 1.0 } else { 0.0 }).collect();
    let mut tape = Tape::new();
    let a = tape.constant(r1.clone());
    let b = tape.constant(Tensor::from_f64(&[n, n], &eye).unwrap());
    let out = factorized_random_logits(&mut tape, a, b, n).unwrap();
    assert_eq!(tape.value(out).data(), r1.data());
}

fn svd_ratio_beyond(k: usize, n: usize, seed: u64) -> f64 {
    let r1 = gaussian(&[n, k], seed);
    let r2 = gaussian(&[n, k], seed + 1);
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(r1), tape.constant(r2));
    let out = factorized_random_logits(&mut tape, a, b, n).unwrap();
    let m = DMatrix::from_row_slice(n, n, tape.value(out).data());
    let mut s: Vec<f64> = m.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s[k..].iter().fold(0.0, |acc: f64, v| acc.max(*v)) / s[0]
}

#[test]
fn factorized_random_rank_is_bounded_by_k() {
    for seed in 0..3 {
        assert!(svd_ratio_beyond(3, 10, seed * 7) < 1e-10);
    }
}

#[test]
fn rank_one_logits_have_vanishing_minors() {
    let n = 6;
    let mut tape = Tape::new();
    let a = tape.constant(gaussian(&[n, 1], 20));
    let b = tape.constant(gaussian(&[n, 1], 21));
    let out = factorized_random_logits(&mut tape, a, b, n).unwrap();
    let m = tape.value(out);
    for i in 0..n - 1 {
        for j in 0..n - 1 {
            let minor = m.at(&[i, j]) * m.at(&[i + 1, j + 1]) - m.at(&[i, j + 1]) * m.at(&[i + 1, j]);
            assert!(minor.abs() < 1e-10);
        }
    }
}

fn mix(members: &[Tensor<f64>], logits: &[f64]) -> Vec<f64> {
    let mut tape = Tape::new();
    let vars: Vec<_> = members.iter().map(|m| tape.constant(m.clone())).collect();
    let w = tape.constant(Tensor::from_f64(&[logits.len()], logits).unwrap());
    let out = mixture_logits(&mut tape, &vars, w).unwrap();
    tape.value(out).data().to_vec()
}

#[test]
fn mixture_examples() {
    let a = gaussian(&[2, 3, 3], 30);
    let b = gaussian(&[2, 3, 3], 31);
    close(&mix(&[a.clone(), b.clone()], &[40.0, -40.0]), a.data(), 1e-12);
    close(&mix(&[a.clone(), a.clone()], &[0.3, -1.7]), a.data(), 1e-12);
    let avg: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
    close(&mix(&[a, b], &[0.0, 0.0]), &avg, 1e-12);
}

#[test]
fn mixture_members_must_agree_in_shape() {
    let mut tape = Tape::new();
    let a = tape.constant(gaussian(&[1, 2, 2], 1));
    let b = tape.constant(gaussian(&[1, 3, 3], 2));
    let w = tape.constant(Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap());
    assert!(mixture_logits(&mut tape, &[a, b], w).is_err());
}

#[test]
fn two_heads_match_manual_slicing() {
    let (b, l, d, heads) = (2, 4, 6, 2);
    let dh = d / heads;
    let mut store = ParamStore::new(5);
    let layer = MultiHeadAttention::build(&mut store, "a", SynthKind::Dense, 5, d, heads, None).unwrap();
    let x = gaussian(&[b, l, d], 40);
    let mut f = Forward::new(&store);
    let xv = f.tape.constant(x.clone());
    let out = layer
        .forward(&mut f, xv, None, AttentionRole::EncoderSelf, 0)
        .unwrap();
    let got = f.tape.value(out.output).data().to_vec();

    let w_o = &store.by_name("a.w_o").unwrap().value;
    let mut want = vec![0.0; b * l * d];
    for h in 0..heads {
        let w1 = &store.by_name(&format!("a.head{h}.w1")).unwrap().value;
        let w2 = &store.by_name(&format!("a.head{h}.w2")).unwrap().value;
        let wg = &store.by_name(&format!("a.head{h}.w_g")).unwrap().value;
        for bi in 0..b {
            let v: Vec<Vec<f64>> = (0..l).map(|j| row_times(&x, bi, j, wg)).collect();
            for i in 0..l {
                let hid: Vec<f64> = row_times(&x, bi, i, w1).into_iter().map(|v| v.max(0.0)).collect();
                let s: Vec<f64> = (0..l).map(|j| (0..d).map(|p| hid[p] * w2.at(&[p, j])).sum()).collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                let y: Vec<f64> = (0..dh).map(|c| (0..l).map(|j| e[j] / z * v[j][c]).sum()).collect();
                // this head's slice of W_O
                for o in 0..d {
                    want[(bi * l + i) * d + o] += (0..dh).map(|c| y[c] * w_o.at(&[h * dh + c, o])).sum::<f64>();
                }
            }
        }
    }
    close(&got, &want, 1e-12);
}

#[test]
fn loss_matches_loop_oracle() {
    let (b, l, v) = (2, 3, 5);
    let logits = gaussian(&[b, l, v], 50);
    let targets = [1u32, 4, 0, 2, 3, 3];
    let mask = [true, true, false, true, false, true];
    let store = ParamStore::new(0);
    let mut f = Forward::new(&store);
    let lv = f.tape.constant(logits.clone());
    let out = loss(&mut f, lv, &targets, &mask).unwrap();
    let mut total = 0.0;
    let mut n = 0.0;
    for r in 0..b * l {
        if !mask[r] {
            continue;
        }
        let row = &logits.data()[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[r] as usize];
        n += 1.0;
    }
    assert!((f.tape.value(out).data()[0] - total / n).abs() < 1e-12);
}

#[test]
fn uniform_logits_give_log_vocab_loss() {
    let store = ParamStore::new(0);
    let mut f = Forward::new(&store);
    let lv = f.tape.constant(Tensor::zeros(&[1, 4, 7]).unwrap());
    let out = loss(&mut f, lv, &[1, 2, 3, 4], &[true; 4]).unwrap();
    assert!((f.tape.value(out).data()[0] - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logits_drive_loss_to_zero() {
    let mut prev = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 50.0] {
        let store = ParamStore::new(0);
        let mut f = Forward::new(&store);
        let lv = f.tape.constant(Tensor::from_f64(&[1, 1, 3], &[0.0, margin, 0.0]).unwrap());
        let out = loss(&mut f, lv, &[1], &[true]).unwrap();
        let v = f.tape.value(out).data()[0];
        assert!(v < prev);
        prev = v;
    }
    assert!(prev < 1e-20);
}

#[test]
fn all_pad_batch_is_an_error() {
    let store = ParamStore::new(0);
    let mut f = Forward::new(&store);
    let lv = f.tape.constant(Tensor::zeros(&[1, 2, 3]).unwrap());
    assert!(loss(&mut f, lv, &[0, 0], &[false, false]).is_err());
}

fn subsumption_config(mode: ModelMode, kind: SynthKind) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 16,
        heads: 2,
        ffn_dim: 32,
        vocab: 11,
        max_len: 8,
        ..ModelConfig::new(mode, kind)
    }
}

#[test]
fn single_member_dot_product_mixture_is_a_plain_transformer() {
    let kind = SynthKind::Mixture {
        members: vec![SynthKind::dot_product()],
        learnable_weights: true,
    };
    for mode in [ModelMode::Decoder, ModelMode::Encoder] {
        for seed in 0..4 {
            let model = Model::<f64>::new(subsumption_config(mode, kind.clone()), seed).unwrap();
            let stack = if mode == ModelMode::Decoder { "dec" } else { "enc" };
            let tokens = common::random_tokens(seed, 3, 8, 11);
            let gap = common::max_gap_to_reference(&model, &tokens, |l, h| format!("{stack}.layer{l}.self.head{h}.m0"));
            assert!(gap < 1e-10, "{mode:?} seed {seed}: {gap:e}");
        }
    }
}

#[test]
fn plain_dot_product_model_matches_reference() {
    let model = Model::<f64>::new(subsumption_config(ModelMode::Decoder, SynthKind::dot_product()), 3).unwrap();
    let tokens = common::random_tokens(9, 2, 7, 11);
    let gap = common::max_gap_to_reference(&model, &tokens, |l, h| format!("dec.layer{l}.self.head{h}"));
    assert!(gap < 1e-10, "{gap:e}");
}
