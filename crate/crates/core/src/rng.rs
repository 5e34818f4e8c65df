//! Counter-based seeded random streams and tensor initializers.
//!
//! Each named tensor draws from its own ChaCha stream selected by a stable
//! hash of the name, so initial values do not depend on allocation order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Distribution used by [`seeded_init`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Uniform { lo: f64, hi: f64 },
    Gaussian { std: f64 },
    Constant(f64),
}

impl Init {
    /// Glorot/Xavier uniform bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(fan_in: usize, fan_out: usize) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Init::Uniform { lo: -a, hi: a }
    }
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stream_id(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG positioned at the start of stream `stream` under `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for a named purpose, e.g. a parameter name or `"data/train"`.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    stream_rng(seed, stream_id(name))
}

/// Deterministic tensor initialization: same `(dist, shape, seed, stream)`
/// gives bit-identical output.
pub fn seeded_init<T: Scalar>(dist: Init, shape: &[usize], seed: u64, stream: u64) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let mut rng = stream_rng(seed, stream);
    let data: Vec<T> = match dist {
        Init::Uniform { lo, hi } => {
            if !(lo < hi) {
                return Err(TensorError::InvalidDistribution(format!(
                    "uniform requires lo < hi, got [{lo}, {hi})"
                )));
            }
            let u = Uniform::new(lo, hi)
                .map_err(|e| TensorError::InvalidDistribution(e.to_string()))?;
            (0..n).map(|_| T::from_f64_lossy(u.sample(&mut rng))).collect()
        }
        Init::Gaussian { std } => {
            if !(std > 0.0) {
                return Err(TensorError::InvalidDistribution(format!(
                    "gaussian requires std > 0, got {std}"
                )));
            }
            let g = Normal::new(0.0, std)
                .map_err(|e| TensorError::InvalidDistribution(e.to_string()))?;
            (0..n).map(|_| T::from_f64_lossy(g.sample(&mut rng))).collect()
        }
        Init::Constant(c) => vec![T::from_f64_lossy(c); n],
    };
    Tensor::new(shape, data)
}

/// Uniform index draw in `0..n`.
pub fn index(rng: &mut impl Rng, n: usize) -> usize {
    rng.random_range(0..n)
}
