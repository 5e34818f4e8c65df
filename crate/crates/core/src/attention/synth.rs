//! Synthesizing functions: each maps an input (or nothing) to attention
//! logits of shape `[b, L, L]` (or `[L, L]` for input-independent ones).

use crate::error::{ModelError, TensorError};
use crate::forward::Forward;
use crate::params::{ParamId, ParamStore};
use crate::rng::Init;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

use super::spec::{SynthKind, SynthesizerSpec};

type Result<T> = std::result::Result<T, ModelError>;

fn check_len(len: usize, max_len: usize) -> Result<()> {
    if len > max_len {
        return Err(ModelError::MaxLengthExceeded { len, max_len });
    }
    Ok(())
}

fn seq_len<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<usize> {
    let s = tape.shape(x);
    if s.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "synthesizer",
            shape: s.to_vec(),
            reason: "expected [batch, len, dim]".into(),
        }
        .into());
    }
    Ok(s[1])
}

/// Dense synthesizer: row `i` is `relu(X_i W₁) W₂[:, :L]`.
///
/// `w1` is `d×d`, `w2` is `d×N`.
pub fn dense_logits<T: Scalar>(tape: &mut Tape<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let len = seq_len(tape, x)?;
    check_len(len, tape.shape(w2)[1])?;
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h)?;
    let w2 = tape.narrow(w2, 1, 0, len)?;
    Ok(tape.matmul(h, w2)?)
}

/// Random synthesizer: the top-left `L×L` block of `R`.
pub fn random_logits<T: Scalar>(tape: &mut Tape<T>, r: Var, len: usize) -> Result<Var> {
    check_len(len, tape.shape(r)[0])?;
    if len == tape.shape(r)[0] {
        return Ok(r);
    }
    let rows = tape.narrow(r, 0, 0, len)?;
    Ok(tape.narrow(rows, 1, 0, len)?)
}

/// Factorized random synthesizer: `R₁[:L] · R₂[:L]ᵀ`, rank at most `k`.
pub fn factorized_random_logits<T: Scalar>(tape: &mut Tape<T>, r1: Var, r2: Var, len: usize) -> Result<Var> {
    check_len(len, tape.shape(r1)[0])?;
    let a = tape.narrow(r1, 0, 0, len)?;
    let b = tape.narrow(r2, 0, 0, len)?;
    let bt = tape.transpose_last2(b)?;
    Ok(tape.matmul(a, bt)?)
}

/// Factorized dense synthesizer.
///
/// With `H = relu(X W₁)`, `A = H W_A` (`a` wide) and `B = H W_B` (`b` wide),
/// each row is `tile_block(A, b) ⊙ tile_cyclic(B, a)`, which enumerates every
/// product `A_p·B_q` once, then truncated to the first `L` columns.
pub fn factorized_dense_logits<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w1: Var,
    w_a: Var,
    w_b: Var,
) -> Result<Var> {
    let len = seq_len(tape, x)?;
    let (a, b) = (tape.shape(w_a)[1], tape.shape(w_b)[1]);
    check_len(len, a * b)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.relu(h)?;
    let fa = tape.matmul(h, w_a)?;
    let fb = tape.matmul(h, w_b)?;
    let ta = tape.tile_block(fa, b)?;
    let tb = tape.tile_cyclic(fb, a)?;
    let c = tape.mul(ta, tb)?;
    Ok(tape.narrow(c, 2, 0, len)?)
}

/// Dot-product logits `(X_q W_Q)(X_k W_K)ᵀ · scale`.
pub fn dot_product_logits<T: Scalar>(
    tape: &mut Tape<T>,
    x_q: Var,
    x_k: Var,
    w_q: Var,
    w_k: Var,
    scale: Option<T>,
) -> Result<Var> {
    let q = tape.matmul(x_q, w_q)?;
    let k = tape.matmul(x_k, w_k)?;
    let kt = tape.transpose_last2(k)?;
    let s = tape.matmul(q, kt)?;
    Ok(match scale {
        Some(c) => tape.scale(s, c)?,
        None => s,
    })
}

/// `Σ softmax(mix)ᵢ · membersᵢ`; members must share one shape.
pub fn mixture_logits<T: Scalar>(tape: &mut Tape<T>, members: &[Var], mix: Var) -> Result<Var> {
    let alpha = tape.row_softmax(mix, None)?;
    Ok(tape.weighted_sum(members, alpha)?)
}

/// Parameters of one head's synthesizing function.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthParams {
    DotProduct { w_q: ParamId, w_k: ParamId, scaled: bool },
    Dense { w1: ParamId, w2: ParamId },
    FactorizedDense { w1: ParamId, w_a: ParamId, w_b: ParamId },
    Random { r: ParamId },
    FactorizedRandom { r1: ParamId, r2: ParamId },
    Mixture { members: Vec<SynthParams>, mix: ParamId },
}

/// Where to register input-independent (random) parameters. When set, they
/// are looked up by name first so several layers can share them.
#[derive(Debug, Clone, Copy)]
pub struct RandomSharing<'a> {
    pub prefix: &'a str,
}

impl SynthParams {
    /// Registers the parameters for `spec` under `prefix`.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: &SynthesizerSpec,
        sharing: Option<RandomSharing<'_>>,
    ) -> Result<Self> {
        spec.validate()?;
        build_kind(store, prefix, &spec.kind, spec, sharing)
    }

    /// Scalars allocated for this head's synthesizing function.
    pub fn scalar_count<T: Scalar>(&self, store: &ParamStore<T>) -> usize {
        self.param_ids().iter().map(|&id| store.get(id).value.len()).sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            SynthParams::DotProduct { w_q, w_k, .. } => vec![*w_q, *w_k],
            SynthParams::Dense { w1, w2 } => vec![*w1, *w2],
            SynthParams::FactorizedDense { w1, w_a, w_b } => vec![*w1, *w_a, *w_b],
            SynthParams::Random { r } => vec![*r],
            SynthParams::FactorizedRandom { r1, r2 } => vec![*r1, *r2],
            SynthParams::Mixture { members, mix } => {
                let mut ids: Vec<ParamId> = members.iter().flat_map(|m| m.param_ids()).collect();
                ids.push(*mix);
                ids
            }
        }
    }

    pub fn is_input_independent(&self) -> bool {
        match self {
            SynthParams::Random { .. } | SynthParams::FactorizedRandom { .. } => true,
            SynthParams::Mixture { members, .. } => members.iter().all(|m| m.is_input_independent()),
            _ => false,
        }
    }

    /// Self-attention logits `[b, L, L]` for input `x` of shape `[b, L, d]`.
    pub fn logits<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let shape = f.tape.shape(x).to_vec();
        let (batch, len) = (shape[0], shape[1]);
        let out = match self {
            SynthParams::DotProduct { w_q, w_k, scaled } => {
                let (wq, wk) = (f.param(*w_q), f.param(*w_k));
                let dh = f.tape.shape(wq)[1];
                let scale = scaled.then(|| T::one() / T::from_usize_lossy(dh).sqrt());
                dot_product_logits(&mut f.tape, x, x, wq, wk, scale)?
            }
            SynthParams::Dense { w1, w2 } => {
                let (w1, w2) = (f.param(*w1), f.param(*w2));
                dense_logits(&mut f.tape, x, w1, w2)?
            }
            SynthParams::FactorizedDense { w1, w_a, w_b } => {
                let (w1, wa, wb) = (f.param(*w1), f.param(*w_a), f.param(*w_b));
                factorized_dense_logits(&mut f.tape, x, w1, wa, wb)?
            }
            SynthParams::Random { r } => {
                let r = f.param(*r);
                let l = random_logits(&mut f.tape, r, len)?;
                f.tape.broadcast_batch(l, batch)?
            }
            SynthParams::FactorizedRandom { r1, r2 } => {
                let (r1, r2) = (f.param(*r1), f.param(*r2));
                let l = factorized_random_logits(&mut f.tape, r1, r2, len)?;
                f.tape.broadcast_batch(l, batch)?
            }
            SynthParams::Mixture { members, mix } => {
                let parts = members
                    .iter()
                    .map(|m| m.logits(f, x))
                    .collect::<Result<Vec<_>>>()?;
                let mix = f.param(*mix);
                mixture_logits(&mut f.tape, &parts, mix)?
            }
        };
        Ok(out)
    }
}

fn build_kind<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    kind: &SynthKind,
    spec: &SynthesizerSpec,
    sharing: Option<RandomSharing<'_>>,
) -> Result<SynthParams> {
    let (n, d, dh) = (spec.max_len, spec.model_dim, spec.head_dim);
    let r_init = Init::Gaussian {
        std: 1.0 / (n as f64).sqrt(),
    };
    let shared = |store: &mut ParamStore<T>, leaf: &str, shape: &[usize], frozen: bool| -> Result<ParamId> {
        match sharing {
            Some(s) => {
                let name = format!("{}.{leaf}", s.prefix);
                match store.id(&name) {
                    Some(id) => Ok(id),
                    None => store.register(&name, shape, r_init, frozen),
                }
            }
            None => store.register(&format!("{prefix}.{leaf}"), shape, r_init, frozen),
        }
    };
    let p = |leaf: &str| format!("{prefix}.{leaf}");
    Ok(match kind {
        SynthKind::DotProduct { scaled } => SynthParams::DotProduct {
            w_q: store.register(&p("w_q"), &[d, dh], Init::xavier(d, dh), false)?,
            w_k: store.register(&p("w_k"), &[d, dh], Init::xavier(d, dh), false)?,
            scaled: *scaled,
        },
        SynthKind::Dense => SynthParams::Dense {
            w1: store.register(&p("w1"), &[d, d], Init::xavier(d, d), false)?,
            w2: store.register(&p("w2"), &[d, n], Init::xavier(d, n), false)?,
        },
        SynthKind::FactorizedDense { a, b } => SynthParams::FactorizedDense {
            w1: store.register(&p("w1"), &[d, d], Init::xavier(d, d), false)?,
            w_a: store.register(&p("w_a"), &[d, *a], Init::xavier(d, *a), false)?,
            w_b: store.register(&p("w_b"), &[d, *b], Init::xavier(d, *b), false)?,
        },
        SynthKind::Random { trainable } => SynthParams::Random {
            r: shared(store, "r", &[n, n], !*trainable)?,
        },
        SynthKind::FactorizedRandom { k } => SynthParams::FactorizedRandom {
            r1: shared(store, "r1", &[n, *k], false)?,
            r2: shared(store, "r2", &[n, *k], false)?,
        },
        SynthKind::Mixture {
            members,
            learnable_weights,
        } => {
            let built = members
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let sub = format!("{prefix}.m{i}");
                    let sub_share = sharing.map(|s| format!("{}.m{i}", s.prefix));
                    build_kind(
                        store,
                        &sub,
                        m,
                        spec,
                        sub_share.as_deref().map(|prefix| RandomSharing { prefix }),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let mix = store.register(
                &p("mix"),
                &[members.len()],
                Init::Constant(0.0),
                !*learnable_weights,
            )?;
            SynthParams::Mixture {
                members: built,
                mix,
            }
        }
    })
}
