//! Multi-head attention built on any synthesizing function.

use crate::error::{ModelError, TensorError};
use crate::forward::{AttentionRecord, AttentionRole, Forward};
use crate::params::{ParamId, ParamStore};
use crate::rng::Init;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::{Mask, Tensor};

use super::spec::{SynthKind, SynthesizerSpec};
use super::synth::{dot_product_logits, RandomSharing, SynthParams};

type Result<T> = std::result::Result<T, ModelError>;

/// Output of one attention block.
#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    /// `[b, L, d]`
    pub output: Var,
    /// `[b, heads, L, L_keys]`, retained only in inspection mode.
    pub logits: Option<Tensor<T>>,
    /// `[b, heads, L, L_keys]`, retained only in inspection mode.
    pub weights: Option<Tensor<T>>,
}

/// `softmax(masked logits) · (X W_G)` for one head.
///
/// Returns `(weights, head_output)`.
pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    mask: Option<&Mask>,
    x_values: Var,
    w_g: Var,
) -> Result<(Var, Var)> {
    let weights = tape.row_softmax(logits, mask)?;
    let v = tape.matmul(x_values, w_g)?;
    let y = tape.matmul(weights, v)?;
    Ok((weights, y))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub synth: SynthParams,
    pub w_g: ParamId,
}

/// Multi-head attention: each head owns an independent synthesizer and value
/// projection; head outputs are concatenated and projected by `W_O`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadAttention {
    pub spec: SynthesizerSpec,
    pub heads: Vec<HeadParams>,
    pub w_o: ParamId,
}

impl MultiHeadAttention {
    /// Registers a layer with `heads` heads under `prefix`.
    ///
    /// `share_prefix`, when set, names input-independent parameters so that
    /// layers built with the same value reuse them.
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kind: SynthKind,
        max_len: usize,
        model_dim: usize,
        heads: usize,
        share_prefix: Option<&str>,
    ) -> Result<Self> {
        if heads == 0 || !model_dim.is_multiple_of(heads) {
            return Err(ModelError::Config(format!(
                "model dim {model_dim} is not divisible by {heads} heads"
            )));
        }
        let head_dim = model_dim / heads;
        let spec = SynthesizerSpec::new(kind, max_len, model_dim, head_dim)?;
        let mut hs = Vec::with_capacity(heads);
        for h in 0..heads {
            let hp = format!("{prefix}.head{h}");
            let share = share_prefix.map(|s| format!("{s}.head{h}"));
            let synth = SynthParams::build(
                store,
                &hp,
                &spec,
                share.as_deref().map(|prefix| RandomSharing { prefix }),
            )?;
            let w_g = store.register(
                &format!("{hp}.w_g"),
                &[model_dim, head_dim],
                Init::xavier(model_dim, head_dim),
                false,
            )?;
            hs.push(HeadParams { synth, w_g });
        }
        let w_o = store.register(
            &format!("{prefix}.w_o"),
            &[model_dim, model_dim],
            Init::xavier(model_dim, model_dim),
            false,
        )?;
        Ok(Self {
            spec,
            heads: hs,
            w_o,
        })
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    /// Self-attention over `x` (`[b, L, d]`).
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Forward<'_, T>,
        x: Var,
        mask: Option<&Mask>,
        role: AttentionRole,
        layer: usize,
    ) -> Result<AttentionOutput<T>> {
        check_input(&f.tape, x, self.spec.model_dim)?;
        let mut head_logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            head_logits.push(head.synth.logits(f, x)?);
        }
        self.combine(f, &head_logits, x, mask, role, layer)
    }

    /// Cross-attention: queries from `x`, keys and values from `memory`.
    /// Only dot-product heads can attend across sequences.
    pub fn forward_cross<T: Scalar>(
        &self,
        f: &mut Forward<'_, T>,
        x: Var,
        memory: Var,
        mask: Option<&Mask>,
        layer: usize,
    ) -> Result<AttentionOutput<T>> {
        check_input(&f.tape, x, self.spec.model_dim)?;
        check_input(&f.tape, memory, self.spec.model_dim)?;
        let mut head_logits = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let SynthParams::DotProduct { w_q, w_k, scaled } = &head.synth else {
                return Err(ModelError::Config(
                    "cross-attention must use dot-product heads".into(),
                ));
            };
            let (wq, wk) = (f.param(*w_q), f.param(*w_k));
            let dh = f.tape.shape(wq)[1];
            let scale = scaled.then(|| T::one() / T::from_usize_lossy(dh).sqrt());
            head_logits.push(dot_product_logits(&mut f.tape, x, memory, wq, wk, scale)?);
        }
        self.combine(f, &head_logits, memory, mask, AttentionRole::DecoderCross, layer)
    }

    fn combine<T: Scalar>(
        &self,
        f: &mut Forward<'_, T>,
        head_logits: &[Var],
        x_values: Var,
        mask: Option<&Mask>,
        role: AttentionRole,
        layer: usize,
    ) -> Result<AttentionOutput<T>> {
        let mut outs = Vec::with_capacity(self.heads.len());
        let mut weights = Vec::with_capacity(self.heads.len());
        for (head, &logits) in self.heads.iter().zip(head_logits) {
            let w_g = f.param(head.w_g);
            let (w, y) = attend(&mut f.tape, logits, mask, x_values, w_g)?;
            weights.push(w);
            outs.push(y);
        }
        let cat = if outs.len() == 1 {
            outs[0]
        } else {
            f.tape.concat_last(&outs)?
        };
        let w_o = f.param(self.w_o);
        let output = f.tape.matmul(cat, w_o)?;

        let (mut lg, mut wt) = (None, None);
        if f.inspecting() {
            let l = stack_heads(&f.tape, head_logits)?;
            let w = stack_heads(&f.tape, &weights)?;
            f.record(AttentionRecord {
                role,
                layer,
                logits: l.clone(),
                weights: w.clone(),
            });
            lg = Some(l);
            wt = Some(w);
        }
        Ok(AttentionOutput {
            output,
            logits: lg,
            weights: wt,
        })
    }
}

fn check_input<T: Scalar>(tape: &Tape<T>, x: Var, d: usize) -> Result<()> {
    let s = tape.shape(x);
    if s.len() != 3 || s[2] != d {
        return Err(TensorError::InvalidShape {
            op: "attention",
            shape: s.to_vec(),
            reason: format!("expected [batch, len, {d}]"),
        }
        .into());
    }
    Ok(())
}

/// Stacks per-head `[b, L, K]` tensors into `[b, heads, L, K]`.
fn stack_heads<T: Scalar>(tape: &Tape<T>, per_head: &[Var]) -> Result<Tensor<T>> {
    let first = tape.shape(per_head[0]);
    let (b, l, k) = (first[0], first[1], first[2]);
    let h = per_head.len();
    let mut data = Vec::with_capacity(b * h * l * k);
    for bi in 0..b {
        for &v in per_head {
            let d = tape.value(v).data();
            data.extend_from_slice(&d[bi * l * k..(bi + 1) * l * k]);
        }
    }
    Ok(Tensor::new(&[b, h, l, k], data)?)
}
