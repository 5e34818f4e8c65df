//! Adam with bias correction.

use std::collections::BTreeMap;

use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; `0` disables warmup.
    pub warmup: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            warmup: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite gradient at step {step} in `{param}` (norm {norm})")]
pub struct NonFiniteGradient {
    pub step: u64,
    pub param: String,
    pub norm: f64,
}

/// Moment buffers keyed by parameter name. Frozen parameters never get an
/// entry and are never touched.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// Completed update count.
    pub step: u64,
    pub moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let moments = store
            .iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(_, p)| {
                let z = Tensor::zeros(p.value.shape()).expect("parameter shapes are valid");
                (p.name.clone(), (z.clone(), z))
            })
            .collect();
        Self {
            config,
            step: 0,
            moments,
        }
    }

    /// Learning rate used by the next update.
    pub fn current_lr(&self) -> f64 {
        let c = &self.config;
        if c.warmup == 0 {
            c.lr
        } else {
            c.lr * ((self.step + 1) as f64 / c.warmup as f64).min(1.0)
        }
    }

    /// Applies one update from the store's accumulated gradients.
    ///
    /// All gradients are checked before any parameter moves, so an abort
    /// leaves the store unchanged.
    pub fn update(&mut self, store: &mut ParamStore<T>) -> Result<(), NonFiniteGradient> {
        for p in store.iter_mut() {
            if !p.frozen && !p.grad.is_finite() {
                return Err(NonFiniteGradient {
                    step: self.step,
                    param: p.name.clone(),
                    norm: p.grad.norm().to_f64_lossy(),
                });
            }
        }
        let c = self.config;
        let t = (self.step + 1) as i32;
        let lr = self.current_lr();
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::from_f64_lossy(c.beta1), T::from_f64_lossy(c.beta2));
        let (one, eps) = (T::one(), T::from_f64_lossy(c.eps));
        let (bc1, bc2, lr) = (T::from_f64_lossy(bc1), T::from_f64_lossy(bc2), T::from_f64_lossy(lr));
        for p in store.iter_mut() {
            if p.frozen {
                continue;
            }
            let (m, v) = self
                .moments
                .get_mut(&p.name)
                .expect("moments exist for every trainable parameter");
            let (m, v) = (m.data_mut(), v.data_mut());
            let g = p.grad.data();
            for (i, x) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        self.step += 1;
        Ok(())
    }
}
