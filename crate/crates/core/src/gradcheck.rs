//! Central finite-difference checks of tape gradients.

use crate::params::{Grads, ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Magnitude below which entries are compared absolutely.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, MAGNITUDE_FLOOR)`. Central differences carry
/// rounding noise of roughly `1e-16 · |loss| / step`, around 1e-9 here, so
/// entries whose true gradient is zero (key biases under softmax, for one)
/// would otherwise be judged on noise alone.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Perturbs every entry of the selected parameters (all of them when `only`
/// is `None`) by ±`step` and compares `eval`'s central difference against
/// `analytic`. Parameters are restored afterwards.
pub fn check_params(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    analytic: &Grads,
    step: f64,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.ids().collect(),
    };
    let mut report = GradCheckReport::default();
    for id in ids {
        for k in 0..store.get(id).len() {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + step;
            let plus = eval(store);
            store.get_mut(id).data_mut()[k] = orig - step;
            let minus = eval(store);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    report
}
