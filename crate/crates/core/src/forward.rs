//! Per-pass forward context: a fresh tape plus parameter bindings.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Which attention block an inspection record came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionRole {
    EncoderSelf,
    DecoderSelf,
    DecoderCross,
}

impl AttentionRole {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionRole::EncoderSelf => "encoder_self",
            AttentionRole::DecoderSelf => "decoder_self",
            AttentionRole::DecoderCross => "decoder_cross",
        }
    }
}

/// Attention logits and weights captured while inspection is enabled.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord<T> {
    pub role: AttentionRole,
    pub layer: usize,
    /// `[batch, heads, L, L_keys]`, pre-softmax.
    pub logits: Tensor<T>,
    /// `[batch, heads, L, L_keys]`, post-softmax.
    pub weights: Tensor<T>,
}

/// One forward pass. Parameters are bound to the tape at most once, so
/// shared parameters receive the sum of all their gradient contributions.
pub struct Forward<'a, T> {
    pub tape: Tape<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<ParamId, Var>,
    order: Vec<(ParamId, Var)>,
    inspect: bool,
    records: Vec<AttentionRecord<T>>,
    dropout: Option<(f64, ChaCha8Rng)>,
}

impl<'a, T: Scalar> Forward<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            inspect: false,
            records: Vec::new(),
            dropout: None,
        }
    }

    pub fn with_inspection(mut self, on: bool) -> Self {
        self.inspect = on;
        self
    }

    /// Enables dropout with the given rate; a rate of 0 disables it.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        self.dropout = (rate > 0.0).then_some((rate, rng));
        self
    }

    pub fn inspecting(&self) -> bool {
        self.inspect
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.store.bind(&mut self.tape, id);
        self.bound.insert(id, v);
        self.order.push((id, v));
        v
    }

    pub fn record(&mut self, rec: AttentionRecord<T>) {
        if self.inspect {
            self.records.push(rec);
        }
    }

    pub fn records(&self) -> &[AttentionRecord<T>] {
        &self.records
    }

    pub fn take_records(&mut self) -> Vec<AttentionRecord<T>> {
        std::mem::take(&mut self.records)
    }

    /// Inverted dropout; identity when disabled.
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, rng)) = self.dropout.as_mut() else {
            return Ok(x);
        };
        use rand::Rng;
        let keep = 1.0 - *rate;
        let scale = T::from_f64_lossy(1.0 / keep);
        let shape = self.tape.shape(x).to_vec();
        let n = self.tape.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        let m = self.tape.constant(Tensor::new(&shape, mask)?);
        self.tape.mul(x, m)
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.order
    }

    /// Runs backward from `loss` and returns the bindings needed to
    /// accumulate into the parameter store.
    pub fn backward(&self, loss: Var) -> Result<(Gradients<T>, Vec<(ParamId, Var)>)> {
        let g = self.tape.backward(loss)?;
        Ok((g, self.order.clone()))
    }
}
