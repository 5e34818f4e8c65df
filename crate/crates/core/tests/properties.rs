//! Randomized properties of the tape ops: gradients against central
//! differences, softmax normalization, tiling coverage and replay.

use proptest::prelude::*;
use synth_core::gradcheck::{central_difference, relative_error};
use synth_core::tape::Var;
use synth_core::tensor::{Mask, Tensor};
use synth_core::Tape;

/// Checks d/dx of `sum(w ⊙ build(x))` for fixed pseudo-random `w`.
fn grad_matches(shape: &[usize], x: &[f64], build: impl Fn(&mut Tape, Var) -> Var) -> Result<(), TestCaseError> {
    let weights = |n: usize| -> Vec<f64> { (0..n).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect() };
    let eval = |x: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::from_f64(shape, x).unwrap(), true);
        let out = build(&mut tape, xv);
        tape.value(out)
            .data()
            .iter()
            .zip(weights(tape.value(out).len()))
            .map(|(a, b)| a * b)
            .sum()
    };
    let mut tape = Tape::new();
    let xv = tape.leaf(Tensor::from_f64(shape, x).unwrap(), true);
    let out = build(&mut tape, xv);
    let w = tape.constant(Tensor::from_f64(tape.shape(out), &weights(tape.value(out).len())).unwrap());
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod).unwrap();
    let grads = tape.backward(loss).unwrap();
    let analytic = grads.get(xv).unwrap().data().to_vec();
    let numeric = central_difference(eval, x, 1e-5);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        // FD roundoff is ~1e-10 at h = 1e-5; below that only relative
        // agreement is meaningful for nonzero gradients
        let e = relative_error(*a, *n, 1e-6);
        prop_assert!(e < 1e-4 || (a - n).abs() < 1e-8, "entry {i}: analytic {a} numeric {n} rel {e}");
    }
    Ok(())
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, n)
}

fn dims() -> impl Strategy<Value = (usize, usize, usize)> {
    (1usize..=4, 1usize..=4, 1usize..=4)
}

fn away_from_zero(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-2.0f64..-0.01, 0.01f64..2.0], n)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn matmul_gradients((m, k, n) in dims(), seed in 0u64..1000) {
        let a: Vec<f64> = (0..m * k).map(|i| ((i as u64 * 31 + seed) % 17) as f64 / 8.0 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i as u64 * 13 + seed) % 19) as f64 / 9.0 - 1.0).collect();
        let bt = Tensor::from_f64(&[k, n], &b).unwrap();
        grad_matches(&[m, k], &a, |t, x| { let c = t.constant(bt.clone()); t.matmul(x, c).unwrap() })?;
        let at = Tensor::from_f64(&[m, k], &a).unwrap();
        grad_matches(&[k, n], &b, |t, x| { let c = t.constant(at.clone()); t.matmul(c, x).unwrap() })?;
    }

    #[test]
    fn batched_matmul_gradients(x in values(2 * 3 * 2)) {
        let w = Tensor::from_f64(&[2, 4], &[0.5, -1.0, 2.0, 0.1, 0.3, 0.7, -0.2, 1.1]).unwrap();
        grad_matches(&[2, 3, 2], &x, |t, x| { let c = t.constant(w.clone()); t.matmul(x, c).unwrap() })?;
        grad_matches(&[2, 3, 2], &x, |t, x| { let y = t.transpose_last2(x).unwrap(); t.matmul(x, y).unwrap() })?;
    }

    #[test]
    fn relu_gradients_away_from_kink(x in away_from_zero(8)) {
        grad_matches(&[2, 4], &x, |t, x| t.relu(x).unwrap())?;
    }

    #[test]
    fn elementwise_gradients(x in values(6), c in -3.0f64..3.0) {
        let other = Tensor::from_f64(&[2, 3], &[0.4, -1.2, 2.0, 0.0, 0.9, -0.5]).unwrap();
        grad_matches(&[2, 3], &x, |t, x| { let o = t.constant(other.clone()); t.add(x, o).unwrap() })?;
        grad_matches(&[2, 3], &x, |t, x| { let o = t.constant(other.clone()); t.mul(x, o).unwrap() })?;
        grad_matches(&[2, 3], &x, |t, x| t.mul(x, x).unwrap())?;
        grad_matches(&[2, 3], &x, |t, x| t.scale(x, c).unwrap())?;
        let bias = Tensor::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        grad_matches(&[2, 3], &x, |t, x| { let b = t.constant(bias.clone()); t.add(x, b).unwrap() })?;
    }

    #[test]
    fn softmax_gradients(x in values(12), keep in prop::collection::vec(any::<bool>(), 12)) {
        grad_matches(&[3, 4], &x, |t, x| t.row_softmax(x, None).unwrap())?;
        let mut allowed = keep.clone();
        for r in 0..3 { allowed[r * 4] = true; }
        let mask = Mask::new(1, 3, 4, allowed).unwrap();
        grad_matches(&[3, 4], &x, |t, x| t.row_softmax(x, Some(&mask)).unwrap())?;
    }

    #[test]
    fn tiling_gradients(x in values(6), f in 1usize..4) {
        grad_matches(&[2, 3], &x, |t, x| t.tile_block(x, f).unwrap())?;
        grad_matches(&[2, 3], &x, |t, x| t.tile_cyclic(x, f).unwrap())?;
    }

    #[test]
    fn slicing_and_layout_gradients(x in values(24)) {
        grad_matches(&[2, 3, 4], &x, |t, x| t.narrow(x, 2, 1, 2).unwrap())?;
        grad_matches(&[2, 3, 4], &x, |t, x| t.narrow(x, 1, 0, 2).unwrap())?;
        grad_matches(&[2, 3, 4], &x, |t, x| t.transpose_last2(x).unwrap())?;
        grad_matches(&[2, 3, 4], &x, |t, x| t.reshape(x, &[6, 4]).unwrap())?;
        grad_matches(&[2, 3, 4], &x, |t, x| { let y = t.scale(x, 2.0).unwrap(); t.concat_last(&[x, y]).unwrap() })?;
        grad_matches(&[2, 3, 4], &x, |t, x| { let m = t.reshape(x, &[6, 4]).unwrap(); t.gather_rows(m, &[5, 0, 5, 2], &[2, 2]).unwrap() })?;
    }

    #[test]
    fn broadcast_gradients(x in values(6)) {
        grad_matches(&[2, 3], &x, |t, x| t.broadcast_batch(x, 3).unwrap())?;
    }

    #[test]
    fn layer_norm_gradients(x in values(8)) {
        let g = Tensor::from_f64(&[4], &[1.0, 0.5, -1.5, 2.0]).unwrap();
        let b = Tensor::from_f64(&[4], &[0.1, 0.0, -0.3, 0.2]).unwrap();
        grad_matches(&[2, 4], &x, |t, x| {
            let (gv, bv) = (t.constant(g.clone()), t.constant(b.clone()));
            t.layer_norm(x, gv, bv, 1e-5).unwrap()
        })?;
        let xv = Tensor::from_f64(&[2, 4], &x).unwrap();
        grad_matches(&[4], g.data(), |t, g| {
            let (xc, bv) = (t.constant(xv.clone()), t.constant(b.clone()));
            t.layer_norm(xc, g, bv, 1e-5).unwrap()
        })?;
    }

    #[test]
    fn cross_entropy_gradients(x in values(12)) {
        grad_matches(&[1, 3, 4], &x, |t, x| {
            let l = t.cross_entropy(x, &[1, 3, 0], &[true, false, true]).unwrap();
            t.reshape(l, &[1]).unwrap()
        })?;
    }

    #[test]
    fn weighted_sum_gradients(w in values(3)) {
        let members: Vec<Tensor<f64>> = (0..3)
            .map(|m| Tensor::from_f64(&[2, 2], &[m as f64, 1.0, -1.0, 0.5 * m as f64]).unwrap())
            .collect();
        grad_matches(&[3], &w, |t, w| {
            let vars: Vec<Var> = members.iter().map(|m| t.constant(m.clone())).collect();
            let a = t.row_softmax(w, None).unwrap();
            t.weighted_sum(&vars, a).unwrap()
        })?;
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in values(15), c in -50.0f64..50.0) {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_f64(&[3, 5], &x).unwrap());
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let b = tape.constant(Tensor::from_f64(&[3, 5], &shifted).unwrap());
        let sa = tape.row_softmax(a, None).unwrap();
        let sb = tape.row_softmax(b, None).unwrap();
        let (va, vb) = (tape.value(sa).data().to_vec(), tape.value(sb).data().to_vec());
        for r in 0..3 {
            let s: f64 = va[r * 5..(r + 1) * 5].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-9);
            prop_assert!(va[r * 5..(r + 1) * 5].iter().all(|&v| v >= 0.0));
        }
        for (p, q) in va.iter().zip(&vb) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn block_times_cyclic_enumerates_all_pairs(a in 1usize..6, b in 1usize..6) {
        // distinct primes make every product unique
        const PRIMES: [f64; 10] = [2., 3., 5., 7., 11., 13., 17., 19., 23., 29.];
        let mut tape = Tape::new();
        let av = tape.constant(Tensor::from_f64(&[a], &PRIMES[..a]).unwrap());
        let bv = tape.constant(Tensor::from_f64(&[b], &PRIMES[5..5 + b]).unwrap());
        let ta = tape.tile_block(av, b).unwrap();
        let tb = tape.tile_cyclic(bv, a).unwrap();
        let c = tape.mul(ta, tb).unwrap();
        let mut got: Vec<f64> = tape.value(c).data().to_vec();
        prop_assert_eq!(got.len(), a * b);
        let mut want: Vec<f64> = (0..a).flat_map(|i| (0..b).map(move |j| PRIMES[i] * PRIMES[5 + j])).collect();
        got.sort_by(|x, y| x.partial_cmp(y).unwrap());
        want.sort_by(|x, y| x.partial_cmp(y).unwrap());
        prop_assert_eq!(got, want);
    }
}

#[test]
fn relu_at_zero_has_zero_subgradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap(), true);
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
}

#[test]
fn tape_replay_is_bit_identical() {
    use synth_core::model::{Batch, Model, ModelConfig, ModelMode};
    use synth_core::SynthKind;
    let run = || {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            ffn_dim: 8,
            vocab: 7,
            max_len: 6,
            ..ModelConfig::new(ModelMode::Decoder, SynthKind::Dense)
        };
        let mut model = Model::<f64>::new(cfg, 42).unwrap();
        let input = synth_core::model::Tokens::new(2, 5, vec![1, 2, 3, 4, 5, 6, 5, 4, 3, 2]).unwrap();
        let batch = Batch {
            src: None,
            targets: vec![2, 3, 4, 5, 6, 5, 4, 3, 2, 1],
            target_mask: vec![true; 10],
            input,
        };
        let loss = model.loss_and_grad(&batch, None).unwrap();
        let grads: Vec<u64> = model
            .store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect();
        (loss.to_bits(), grads)
    };
    assert_eq!(run(), run());
}
