use std::fmt;
use std::str::FromStr;

use crate::error::ModelError;

/// Default rank of the factorized random synthesizer.
pub const DEFAULT_RANK: usize = 8;

/// Which synthesizing function produces the attention logits of a head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SynthKind {
    /// `(X W_Q)(X W_K)ᵀ`, optionally scaled by `1/sqrt(d_h)`.
    DotProduct { scaled: bool },
    /// Per-token two-layer projection to a row of `N` logits.
    Dense,
    /// Per-token `a`- and `b`-dim projections tiled out to `a·b = N` logits.
    FactorizedDense { a: usize, b: usize },
    /// Free `N×N` logit matrix, shared across samples.
    Random { trainable: bool },
    /// Rank-`k` product `R₁R₂ᵀ`.
    FactorizedRandom { k: usize },
    /// Softmax-weighted sum of member logits.
    Mixture {
        members: Vec<SynthKind>,
        learnable_weights: bool,
    },
}

impl SynthKind {
    pub fn dot_product() -> Self {
        SynthKind::DotProduct { scaled: true }
    }

    pub fn is_mixture(&self) -> bool {
        matches!(self, SynthKind::Mixture { .. })
    }

    /// Short name used in file names and tables.
    pub fn name(&self) -> String {
        match self {
            SynthKind::DotProduct { .. } => "dot_product".into(),
            SynthKind::Dense => "dense".into(),
            SynthKind::FactorizedDense { .. } => "factorized_dense".into(),
            SynthKind::Random { trainable: true } => "random".into(),
            SynthKind::Random { trainable: false } => "fixed_random".into(),
            SynthKind::FactorizedRandom { .. } => "factorized_random".into(),
            SynthKind::Mixture { members, .. } => {
                let names: Vec<String> = members.iter().map(|m| m.name()).collect();
                format!("mixture({})", names.join("+"))
            }
        }
    }
}

/// Parses a variant name. Mixtures are written as members joined by `+`
/// (`random+dense`); the factor sizes and rank come from `defaults`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantDefaults {
    pub a: usize,
    pub b: usize,
    pub k: usize,
    pub scaled: bool,
    pub mixture_learnable: bool,
}

impl VariantDefaults {
    pub fn for_max_len(max_len: usize) -> Self {
        let (a, b) = balanced_factors(max_len);
        Self {
            a,
            b,
            k: DEFAULT_RANK.min(max_len.saturating_sub(1)).max(1),
            scaled: true,
            mixture_learnable: true,
        }
    }
}

pub fn parse_variant(text: &str, d: &VariantDefaults) -> Result<SynthKind, ModelError> {
    let text = text.trim();
    let single = |s: &str| -> Result<SynthKind, ModelError> {
        Ok(match s.trim() {
            "dot_product" | "vanilla" => SynthKind::DotProduct { scaled: d.scaled },
            "dense" => SynthKind::Dense,
            "factorized_dense" => SynthKind::FactorizedDense { a: d.a, b: d.b },
            "random" => SynthKind::Random { trainable: true },
            "fixed_random" => SynthKind::Random { trainable: false },
            "factorized_random" => SynthKind::FactorizedRandom { k: d.k },
            other => return Err(ModelError::Config(format!("unknown variant `{other}`"))),
        })
    };
    if let Some(inner) = text.strip_prefix("mixture(").and_then(|r| r.strip_suffix(')')) {
        let members = inner.split('+').map(single).collect::<Result<Vec<_>, _>>()?;
        return Ok(SynthKind::Mixture {
            members,
            learnable_weights: d.mixture_learnable,
        });
    }
    if text.contains('+') {
        let members = text.split('+').map(single).collect::<Result<Vec<_>, _>>()?;
        return Ok(SynthKind::Mixture {
            members,
            learnable_weights: d.mixture_learnable,
        });
    }
    single(text)
}

/// `a·b = n` with `a ≤ b` and `a` as large as possible (`a = b = √n` for
/// perfect squares).
pub fn balanced_factors(n: usize) -> (usize, usize) {
    let n = n.max(1);
    let mut a = (n as f64).sqrt() as usize;
    while a > 1 && !n.is_multiple_of(a) {
        a -= 1;
    }
    let a = a.max(1);
    (a, n / a)
}

/// One attention variant with the dimensions its parameters depend on.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesizerSpec {
    pub kind: SynthKind,
    /// Maximum sequence length `N`; length-dependent parameters are sized
    /// to it and truncated to the actual length at runtime.
    pub max_len: usize,
    /// Model width `d` seen by the synthesizing functions.
    pub model_dim: usize,
    /// Per-head value width `d_h`.
    pub head_dim: usize,
}

impl SynthesizerSpec {
    pub fn new(kind: SynthKind, max_len: usize, model_dim: usize, head_dim: usize) -> Result<Self, ModelError> {
        let spec = Self {
            kind,
            max_len,
            model_dim,
            head_dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.max_len == 0 || self.model_dim == 0 || self.head_dim == 0 {
            return Err(ModelError::Config("dimensions must be positive".into()));
        }
        validate_kind(&self.kind, self.max_len, false)
    }

    /// Parameter count of this head's synthesizing function. Excludes the
    /// value projection `W_G` and the output projection `W_O`.
    ///
    /// | variant           | count        |
    /// |-------------------|--------------|
    /// | dot product       | `2·d·d_h`    |
    /// | random            | `N²`         |
    /// | factorized random | `2·N·k`      |
    /// | dense             | `d² + d·N`   |
    /// | factorized dense  | `d² + d(a+b)`|
    ///
    /// With a single head `d_h = d` and the dot product count is `2d²`.
    pub fn param_count(&self) -> usize {
        kind_param_count(&self.kind, self.max_len, self.model_dim, self.head_dim)
    }
}

fn kind_param_count(kind: &SynthKind, n: usize, d: usize, dh: usize) -> usize {
    match kind {
        SynthKind::DotProduct { .. } => 2 * d * dh,
        SynthKind::Dense => d * d + d * n,
        SynthKind::FactorizedDense { a, b } => d * d + d * (a + b),
        SynthKind::Random { .. } => n * n,
        SynthKind::FactorizedRandom { k } => 2 * n * k,
        SynthKind::Mixture { members, .. } => {
            members.iter().map(|m| kind_param_count(m, n, d, dh)).sum::<usize>() + members.len()
        }
    }
}

fn validate_kind(kind: &SynthKind, n: usize, nested: bool) -> Result<(), ModelError> {
    match kind {
        SynthKind::FactorizedDense { a, b } => {
            if *a == 0 || *b == 0 || a * b != n {
                return Err(ModelError::Config(format!(
                    "factorized dense needs a·b = N, got {a}·{b} != {n}"
                )));
            }
        }
        SynthKind::FactorizedRandom { k } => {
            if *k == 0 || *k >= n {
                return Err(ModelError::Config(format!(
                    "factorized random needs 1 <= k < N, got k={k}, N={n}"
                )));
            }
        }
        SynthKind::Mixture { members, .. } => {
            if nested {
                return Err(ModelError::Config("mixtures cannot be nested".into()));
            }
            if members.is_empty() {
                return Err(ModelError::Config("mixture needs at least one member".into()));
            }
            for m in members {
                validate_kind(m, n, true)?;
            }
        }
        _ => {}
    }
    Ok(())
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for SynthKind {
    type Err = ModelError;

    /// Parses with default factors for `N = 64`; use [`parse_variant`] to
    /// control them.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_variant(s, &VariantDefaults::for_max_len(64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: SynthKind, n: usize, d: usize) -> SynthesizerSpec {
        SynthesizerSpec::new(kind, n, d, d).unwrap()
    }

    #[test]
    fn table_parameter_counts() {
        assert_eq!(spec(SynthKind::dot_product(), 32, 64).param_count(), 8192);
        assert_eq!(spec(SynthKind::Random { trainable: true }, 32, 64).param_count(), 1024);
        assert_eq!(spec(SynthKind::FactorizedRandom { k: 8 }, 32, 64).param_count(), 512);
        assert_eq!(spec(SynthKind::Dense, 32, 64).param_count(), 6144);
        assert_eq!(
            spec(SynthKind::FactorizedDense { a: 4, b: 8 }, 32, 64).param_count(),
            64 * 64 + 64 * 12
        );
    }

    #[test]
    fn mixture_counts_members_and_weights() {
        let m = SynthKind::Mixture {
            members: vec![SynthKind::Random { trainable: true }, SynthKind::Dense],
            learnable_weights: true,
        };
        assert_eq!(spec(m, 8, 4).param_count(), 64 + 16 + 32 + 2);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = [
            SynthKind::FactorizedDense { a: 3, b: 3 },
            SynthKind::FactorizedRandom { k: 0 },
            SynthKind::FactorizedRandom { k: 16 },
            SynthKind::Mixture {
                members: vec![],
                learnable_weights: true,
            },
            SynthKind::Mixture {
                members: vec![SynthKind::Mixture {
                    members: vec![SynthKind::Dense],
                    learnable_weights: true,
                }],
                learnable_weights: true,
            },
        ];
        for k in bad {
            assert!(SynthesizerSpec::new(k.clone(), 16, 8, 8).is_err(), "{k:?}");
        }
    }

    #[test]
    fn balanced_factor_pairs() {
        assert_eq!(balanced_factors(64), (8, 8));
        assert_eq!(balanced_factors(32), (4, 8));
        assert_eq!(balanced_factors(12), (3, 4));
        assert_eq!(balanced_factors(13), (1, 13));
    }

    #[test]
    fn variant_names_round_trip() {
        let d = VariantDefaults::for_max_len(16);
        for name in [
            "dot_product",
            "dense",
            "factorized_dense",
            "random",
            "fixed_random",
            "factorized_random",
            "mixture(random+dense)",
        ] {
            let k = parse_variant(name, &d).unwrap();
            assert_eq!(k.name(), name);
        }
        assert_eq!(
            parse_variant("random+dot_product", &d).unwrap().name(),
            "mixture(random+dot_product)"
        );
        assert!(parse_variant("sparse", &d).is_err());
    }
}
