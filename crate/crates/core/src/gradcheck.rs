//! Central finite-difference gradient checks.

use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Step for `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// At most this many entries per parameter are probed (evenly spaced).
    pub max_entries_per_param: usize,
    /// Error threshold used to decide whether a probe needs a second look.
    pub tolerance: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_entries_per_param: usize::MAX,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the largest error.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Probes whose central differences disagree across step sizes
    /// (a ReLU kink inside the stencil). Excluded from `max_rel_error`.
    pub nonsmooth: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function of a vector.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Compares analytic parameter gradients against central differences.
///
/// `loss` evaluates the scalar loss for the current parameter values and
/// accumulates its analytic gradient into the store's `grad` buffers.
/// Frozen parameters are skipped.
pub fn check_param_gradients<T, E, F>(
    store: &mut ParamStore<T>,
    mut loss: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, E>
where
    T: Scalar,
    F: FnMut(&mut ParamStore<T>) -> Result<T, E>,
{
    store.zero_grads();
    loss(store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|(_, p)| p.grad.to_f64_vec()).collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        nonsmooth: 0,
    };
    let ids: Vec<_> = store.iter().filter(|(_, p)| !p.frozen).map(|(id, _)| id).collect();
    for id in ids {
        let n = store.get(id).value.len();
        let stride = n.div_ceil(cfg.max_entries_per_param.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let mut probe = |step: f64| -> Result<f64, E> {
                let h = T::from_f64_lossy(step);
                let orig = store.get(id).value.data()[i];
                store.get_mut(id).value.data_mut()[i] = orig + h;
                let up = loss(store)?.to_f64_lossy();
                store.get_mut(id).value.data_mut()[i] = orig - h;
                let down = loss(store)?.to_f64_lossy();
                store.get_mut(id).value.data_mut()[i] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let a = analytic[id.index()][i];
            let numeric = probe(cfg.step)?;
            let mut err = relative_error(a, numeric, cfg.floor);
            if err > cfg.tolerance {
                // Smooth functions give consistent estimates at smaller
                // steps; a kink inside the stencil does not.
                let half = probe(cfg.step / 2.0)?;
                let quarter = probe(cfg.step / 4.0)?;
                let spread = relative_error(half, numeric, cfg.floor)
                    .max(relative_error(quarter, half, cfg.floor));
                if spread > cfg.tolerance {
                    report.nonsmooth += 1;
                    report.checked += 1;
                    continue;
                }
                err = err.min(relative_error(a, quarter, cfg.floor));
            }
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    store.zero_grads();
    Ok(report)
}
