//! Encoder-only, decoder-only and encoder-decoder Transformers whose
//! self-attention uses a configurable synthesizer.
//!
//! Blocks are pre-norm: `x + Attn(LN(x))` then `x + FFN(LN(x))`. Positions
//! use learned embeddings sized to `max_len`. Cross-attention is always
//! dot-product.

use serde::{Deserialize, Serialize};

use crate::attention::{MultiHeadAttention, SynthKind};
use crate::error::ModelError;
use crate::forward::{AttentionRole, Forward};
use crate::params::{ParamId, ParamStore};
use crate::rng::Init;
use crate::scalar::Scalar;
use crate::tape::Var;
use crate::tensor::{Mask, Tensor};

type Result<T> = std::result::Result<T, ModelError>;

/// Reserved padding token id.
pub const PAD_ID: u32 = 0;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelMode {
    Encoder,
    Decoder,
    EncDec,
}

impl ModelMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelMode::Encoder => "encoder",
            ModelMode::Decoder => "decoder",
            ModelMode::EncDec => "enc_dec",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(ModelMode::Encoder),
            "decoder" => Ok(ModelMode::Decoder),
            "enc_dec" => Ok(ModelMode::EncDec),
            other => Err(ModelError::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: ModelMode,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Self-attention synthesizer of the encoder stack.
    pub encoder_attn: SynthKind,
    /// Self-attention synthesizer of the decoder stack.
    pub decoder_attn: SynthKind,
    /// Must be dot-product; anything else fails validation.
    pub cross_attn: SynthKind,
    pub dropout: f64,
    pub tie_embeddings: bool,
    /// Share random-synthesizer parameters across the layers of a stack.
    pub share_random: bool,
}

impl ModelConfig {
    /// Same self-attention variant in every stack.
    pub fn new(mode: ModelMode, attn: SynthKind) -> Self {
        Self {
            mode,
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            vocab: 18,
            max_len: 32,
            encoder_attn: attn.clone(),
            decoder_attn: attn,
            cross_attn: SynthKind::dot_product(),
            dropout: 0.0,
            tie_embeddings: false,
            share_random: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if self.vocab < 2 || self.max_len == 0 || self.ffn_dim == 0 {
            return Err(ModelError::Config("vocab, max_len and ffn_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !matches!(self.cross_attn, SynthKind::DotProduct { .. }) {
            return Err(ModelError::Config(
                "cross-attention cannot be synthesized; it must be dot_product".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Token ids laid out `batch × len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokens {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
}

impl Tokens {
    pub fn new(batch: usize, len: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(ModelError::Config(format!(
                "token grid {batch}×{len} does not match {} ids",
                ids.len()
            )));
        }
        Ok(Self { batch, len, ids })
    }

    /// `true` exactly at non-pad positions.
    pub fn pad_mask(&self) -> Vec<bool> {
        self.ids.iter().map(|&t| t != PAD_ID).collect()
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// One training or evaluation batch.
///
/// `targets[i]` is scored only where `target_mask[i]`; pad positions are
/// never scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Encoder input (enc_dec mode only).
    pub src: Option<Tokens>,
    /// Decoder input, or encoder input in encoder mode.
    pub input: Tokens,
    pub targets: Vec<u32>,
    pub target_mask: Vec<bool>,
}

impl Batch {
    pub fn scored(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.register(&format!("{prefix}.g"), &[d], Init::Constant(1.0), false)?,
            beta: store.register(&format!("{prefix}.b"), &[d], Init::Constant(0.0), false)?,
        })
    }

    fn apply<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (g, b) = (f.param(self.gamma), f.param(self.beta));
        Ok(f.tape.layer_norm(x, g, b, T::from_f64_lossy(LN_EPS))?)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, d: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w1: store.register(&format!("{prefix}.w1"), &[d, hidden], Init::xavier(d, hidden), false)?,
            b1: store.register(&format!("{prefix}.b1"), &[hidden], Init::Constant(0.0), false)?,
            w2: store.register(&format!("{prefix}.w2"), &[hidden, d], Init::xavier(hidden, d), false)?,
            b2: store.register(&format!("{prefix}.b2"), &[d], Init::Constant(0.0), false)?,
        })
    }

    fn apply<T: Scalar>(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (f.param(self.w1), f.param(self.b1), f.param(self.w2), f.param(self.b2));
        let h = f.tape.matmul(x, w1)?;
        let h = f.tape.add(h, b1)?;
        let h = f.tape.relu(h)?;
        let h = f.dropout(h)?;
        let y = f.tape.matmul(h, w2)?;
        Ok(f.tape.add(y, b2)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln_self: LayerNormParams,
    self_attn: MultiHeadAttention,
    cross: Option<(LayerNormParams, MultiHeadAttention)>,
    ln_ffn: LayerNormParams,
    ffn: FeedForward,
}

/// Encoder memory handed to the decoder's cross-attention.
#[derive(Debug, Clone)]
pub struct Memory {
    /// `[b, L_src, d]`
    pub states: Var,
    /// `b × L_src`, `true` at non-pad source positions.
    pub key_valid: Vec<bool>,
}

/// A Transformer and its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    tok_emb: ParamId,
    pos_emb: ParamId,
    encoder: Vec<Block>,
    decoder: Vec<Block>,
    enc_norm: Option<LayerNormParams>,
    dec_norm: Option<LayerNormParams>,
    out_w: Option<ParamId>,
    out_b: ParamId,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(seed);
        let c = &config;
        let d = c.d_model;
        let emb = Init::Gaussian { std: 0.02 };
        let tok_emb = store.register("tok_emb", &[c.vocab, d], emb, false)?;
        let pos_emb = store.register("pos_emb", &[c.max_len, d], emb, false)?;

        let build_stack = |store: &mut ParamStore<T>, stack: &str, kind: &SynthKind, cross: bool| -> Result<Vec<Block>> {
            (0..c.layers)
                .map(|l| {
                    let p = format!("{stack}.layer{l}");
                    let share = c.share_random.then(|| format!("{stack}.shared.self"));
                    let self_attn = MultiHeadAttention::build(
                        store,
                        &format!("{p}.self"),
                        kind.clone(),
                        c.max_len,
                        d,
                        c.heads,
                        share.as_deref(),
                    )?;
                    let cross = if cross {
                        Some((
                            LayerNormParams::build(store, &format!("{p}.ln_cross"), d)?,
                            MultiHeadAttention::build(
                                store,
                                &format!("{p}.cross"),
                                c.cross_attn.clone(),
                                c.max_len,
                                d,
                                c.heads,
                                None,
                            )?,
                        ))
                    } else {
                        None
                    };
                    Ok(Block {
                        ln_self: LayerNormParams::build(store, &format!("{p}.ln_self"), d)?,
                        self_attn,
                        cross,
                        ln_ffn: LayerNormParams::build(store, &format!("{p}.ln_ffn"), d)?,
                        ffn: FeedForward::build(store, &format!("{p}.ffn"), d, c.ffn_dim)?,
                    })
                })
                .collect()
        };

        let (encoder, enc_norm) = if matches!(c.mode, ModelMode::Encoder | ModelMode::EncDec) {
            let blocks = build_stack(&mut store, "enc", &c.encoder_attn, false)?;
            (blocks, Some(LayerNormParams::build(&mut store, "enc.ln_f", d)?))
        } else {
            (Vec::new(), None)
        };
        let (decoder, dec_norm) = if matches!(c.mode, ModelMode::Decoder | ModelMode::EncDec) {
            let blocks = build_stack(&mut store, "dec", &c.decoder_attn, c.mode == ModelMode::EncDec)?;
            (blocks, Some(LayerNormParams::build(&mut store, "dec.ln_f", d)?))
        } else {
            (Vec::new(), None)
        };
        let out_w = if c.tie_embeddings {
            None
        } else {
            Some(store.register("out.w", &[d, c.vocab], emb, false)?)
        };
        let out_b = store.register("out.b", &[c.vocab], Init::Constant(0.0), false)?;
        Ok(Self {
            config,
            store,
            tok_emb,
            pos_emb,
            encoder,
            decoder,
            enc_norm,
            dec_norm,
            out_w,
            out_b,
        })
    }

    /// Self-attention layers in forward order, with their role and index.
    pub fn self_attention_layers(&self) -> Vec<(AttentionRole, usize, &MultiHeadAttention)> {
        let enc = self
            .encoder
            .iter()
            .enumerate()
            .map(|(l, b)| (AttentionRole::EncoderSelf, l, &b.self_attn));
        let dec = self
            .decoder
            .iter()
            .enumerate()
            .map(|(l, b)| (AttentionRole::DecoderSelf, l, &b.self_attn));
        enc.chain(dec).collect()
    }

    fn check_tokens(&self, tokens: &Tokens) -> Result<()> {
        if tokens.len > self.config.max_len {
            return Err(ModelError::MaxLengthExceeded {
                len: tokens.len,
                max_len: self.config.max_len,
            });
        }
        if let Some(&id) = tokens.ids.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    fn embed(&self, f: &mut Forward<'_, T>, tokens: &Tokens) -> Result<Var> {
        self.check_tokens(tokens)?;
        let table = f.param(self.tok_emb);
        let ids: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
        let x = f.tape.gather_rows(table, &ids, &[tokens.batch, tokens.len])?;
        let pos = f.param(self.pos_emb);
        let pos = f.tape.narrow(pos, 0, 0, tokens.len)?;
        let x = f.tape.add(x, pos)?;
        Ok(f.dropout(x)?)
    }

    fn residual(f: &mut Forward<'_, T>, x: Var, y: Var) -> Result<Var> {
        let y = f.dropout(y)?;
        Ok(f.tape.add(x, y)?)
    }

    /// Embeddings followed by the encoder blocks, `[b, L, d]`. Padding keys
    /// are masked in every attention row.
    pub fn encode(&self, f: &mut Forward<'_, T>, tokens: &Tokens) -> Result<Var> {
        if self.enc_norm.is_none() {
            return Err(ModelError::Config("model has no encoder".into()));
        }
        let mut x = self.embed(f, tokens)?;
        let mask = Mask::from_keys(tokens.batch, tokens.len, tokens.len, &tokens.pad_mask(), false)?;
        for (l, block) in self.encoder.iter().enumerate() {
            let h = block.ln_self.apply(f, x)?;
            let a = block
                .self_attn
                .forward(f, h, Some(&mask), AttentionRole::EncoderSelf, l)?;
            x = Self::residual(f, x, a.output)?;
            let h = block.ln_ffn.apply(f, x)?;
            let y = block.ffn.apply(f, h)?;
            x = Self::residual(f, x, y)?;
        }
        Ok(x)
    }

    /// Final-normalized encoder states ready for cross-attention.
    pub fn memory(&self, f: &mut Forward<'_, T>, src: &Tokens) -> Result<Memory> {
        let x = self.encode(f, src)?;
        let norm = self.enc_norm.as_ref().expect("checked in encode");
        Ok(Memory {
            states: norm.apply(f, x)?,
            key_valid: src.pad_mask(),
        })
    }

    fn project(&self, f: &mut Forward<'_, T>, x: Var) -> Result<Var> {
        let w = match self.out_w {
            Some(w) => f.param(w),
            None => {
                let t = f.param(self.tok_emb);
                f.tape.transpose_last2(t)?
            }
        };
        let y = f.tape.matmul(x, w)?;
        let b = f.param(self.out_b);
        Ok(f.tape.add(y, b)?)
    }

    /// Causal decoder over `tokens`, returning vocabulary logits `[b, L, V]`.
    pub fn decode(&self, f: &mut Forward<'_, T>, tokens: &Tokens, memory: Option<&Memory>) -> Result<Var> {
        let Some(norm) = &self.dec_norm else {
            return Err(ModelError::Config("model has no decoder".into()));
        };
        if self.config.mode == ModelMode::EncDec && memory.is_none() {
            return Err(ModelError::MissingMemory);
        }
        let mut x = self.embed(f, tokens)?;
        let (b, len) = (tokens.batch, tokens.len);
        let self_mask = Mask::from_keys(b, len, len, &tokens.pad_mask(), true)?;
        let cross_mask = match memory {
            Some(m) => {
                let src_len = f.tape.shape(m.states)[1];
                Some(Mask::from_keys(b, len, src_len, &m.key_valid, false)?)
            }
            None => None,
        };
        for (l, block) in self.decoder.iter().enumerate() {
            let h = block.ln_self.apply(f, x)?;
            let a = block
                .self_attn
                .forward(f, h, Some(&self_mask), AttentionRole::DecoderSelf, l)?;
            x = Self::residual(f, x, a.output)?;
            if let (Some((ln, cross)), Some(m)) = (&block.cross, memory) {
                let h = ln.apply(f, x)?;
                let a = cross.forward_cross(f, h, m.states, cross_mask.as_ref(), l)?;
                x = Self::residual(f, x, a.output)?;
            }
            let h = block.ln_ffn.apply(f, x)?;
            let y = block.ffn.apply(f, h)?;
            x = Self::residual(f, x, y)?;
        }
        let x = norm.apply(f, x)?;
        self.project(f, x)
    }

    /// Vocabulary logits `[b, L, V]` for a batch in any mode.
    pub fn logits(&self, f: &mut Forward<'_, T>, batch: &Batch) -> Result<Var> {
        match self.config.mode {
            ModelMode::Encoder => {
                let x = self.encode(f, &batch.input)?;
                let norm = self.enc_norm.as_ref().expect("encoder mode");
                let x = norm.apply(f, x)?;
                self.project(f, x)
            }
            ModelMode::Decoder => self.decode(f, &batch.input, None),
            ModelMode::EncDec => {
                let src = batch.src.as_ref().ok_or(ModelError::MissingMemory)?;
                let mem = self.memory(f, src)?;
                self.decode(f, &batch.input, Some(&mem))
            }
        }
    }

    /// Teacher-forced mean cross-entropy of `batch`.
    pub fn batch_loss(&self, f: &mut Forward<'_, T>, batch: &Batch) -> Result<Var> {
        let logits = self.logits(f, batch)?;
        loss(f, logits, &batch.targets, &batch.target_mask)
    }

    /// Forward without gradients; returns logits and (if `inspect`) the
    /// attention records.
    pub fn infer(&self, batch: &Batch, inspect: bool) -> Result<(Tensor<T>, Vec<crate::forward::AttentionRecord<T>>)> {
        let mut f = Forward::new(&self.store).with_inspection(inspect);
        let logits = self.logits(&mut f, batch)?;
        let out = f.tape.value(logits).clone();
        Ok((out, f.take_records()))
    }

    /// Loss and accumulated parameter gradients for one batch.
    pub fn loss_and_grad(&mut self, batch: &Batch, dropout_rng: Option<rand_chacha::ChaCha8Rng>) -> Result<T> {
        let mut store = std::mem::take(&mut self.store);
        let out = self.loss_and_grad_in(&mut store, batch, dropout_rng);
        self.store = store;
        out
    }

    /// As [`Model::loss_and_grad`], against an external store with the same
    /// layout as `self.store`.
    pub fn loss_and_grad_in(
        &self,
        store: &mut ParamStore<T>,
        batch: &Batch,
        dropout_rng: Option<rand_chacha::ChaCha8Rng>,
    ) -> Result<T> {
        let (value, grads, bindings) = {
            let mut f = Forward::new(store);
            if let Some(rng) = dropout_rng {
                f = f.with_dropout(self.config.dropout, rng);
            }
            let l = self.batch_loss(&mut f, batch)?;
            let value = f.tape.value(l).data()[0];
            let (g, b) = f.backward(l)?;
            (value, g, b)
        };
        store.accumulate(&bindings, &grads);
        Ok(value)
    }

    /// Loss only, no gradients or dropout.
    pub fn eval_loss(&self, batch: &Batch) -> Result<T> {
        let mut f = Forward::new(&self.store);
        let l = self.batch_loss(&mut f, batch)?;
        Ok(f.tape.value(l).data()[0])
    }
}

/// Mean negative log-likelihood over positions where `mask` is set.
pub fn loss<T: Scalar>(f: &mut Forward<'_, T>, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
    if !mask.iter().any(|&m| m) {
        return Err(ModelError::AllPad);
    }
    let t: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(f.tape.cross_entropy(logits, &t, mask)?)
}
