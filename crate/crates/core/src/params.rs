//! Named parameter registry shared by layers, the optimizer and checkpoints.

use std::collections::HashMap;

use crate::error::{ModelError, Result};
use crate::rng::{seeded_init, stream_id, Init};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Frozen parameters are stored and checkpointed but never updated.
    pub frozen: bool,
}

/// Ordered registry of named parameters. Registration order is stable and
/// defines checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
    seed: u64,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
            seed,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Registers and initializes a parameter from its own named stream.
    pub fn register(&mut self, name: &str, shape: &[usize], init: Init, frozen: bool) -> Result<ParamId, ModelError> {
        if self.by_name.contains_key(name) {
            return Err(ModelError::Config(format!("parameter {name} registered twice")));
        }
        let value = seeded_init(init, shape, self.seed, stream_id(name))?;
        Ok(self.insert(name, value, frozen))
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, frozen: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape()).expect("value shape is valid");
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad,
            frozen,
        });
        self.by_name.insert(name.to_string(), self.params.len() - 1);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total scalar count over all parameters, frozen ones included.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Records a parameter on the tape. Frozen parameters become constants.
    pub fn bind(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        let p = &self.params[id.0];
        tape.leaf(p.value.clone(), !p.frozen)
    }

    /// Adds tape gradients of bound parameters into their `grad` buffers.
    pub fn accumulate(&mut self, bindings: &[(ParamId, Var)], grads: &Gradients<T>) {
        for &(id, var) in bindings {
            if let Some(g) = grads.get(var) {
                let p = &mut self.params[id.0];
                for (d, &s) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = ParamStore::<f64>::new(0);
        s.register("w", &[2, 2], Init::Constant(0.0), false).unwrap();
        assert!(s.register("w", &[2, 2], Init::Constant(0.0), false).is_err());
    }

    #[test]
    fn init_is_independent_of_registration_order() {
        let mut a = ParamStore::<f64>::new(5);
        a.register("x", &[3], Init::Gaussian { std: 1.0 }, false).unwrap();
        a.register("y", &[3], Init::Gaussian { std: 1.0 }, false).unwrap();
        let mut b = ParamStore::<f64>::new(5);
        b.register("y", &[3], Init::Gaussian { std: 1.0 }, false).unwrap();
        b.register("x", &[3], Init::Gaussian { std: 1.0 }, false).unwrap();
        assert_eq!(a.by_name("x").unwrap().value, b.by_name("x").unwrap().value);
        assert_eq!(a.by_name("y").unwrap().value, b.by_name("y").unwrap().value);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut s = ParamStore::<f64>::new(0);
        let id = s.insert("x", Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap(), false);
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = s.bind(&mut tape, id);
            let sq = tape.mul(x, x).unwrap();
            let l = tape.sum(sq).unwrap();
            let g = tape.backward(l).unwrap();
            s.accumulate(&[(id, x)], &g);
        }
        assert_eq!(s.get(id).grad.data(), &[4.0, 8.0]);
        s.zero_grads();
        assert_eq!(s.get(id).grad.data(), &[0.0, 0.0]);
    }
}
