use super::{gradients, evaluate, Objective, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Floor on the relative-error denominator.
const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().fold(0.0, |m, p| m.max(p.max_rel_error))
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares reverse-mode gradients against central differences
/// `(f(θ+h) - f(θ-h)) / 2h`, one scalar entry at a time. Frozen parameters
/// in `wrt` are skipped.
pub fn finite_difference_check(
    objective: &impl Objective,
    params: &ParamStore,
    wrt: &[&str],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::config(format!("finite-difference step must be positive, got {h}")));
    }
    let active: Vec<&str> = wrt
        .iter()
        .copied()
        .filter(|name| params.get(name).map(|p| !p.is_frozen()).unwrap_or(true))
        .collect();
    let analytic = gradients(objective, params, &active)?;
    let mut probe = params.clone();
    let mut checks = Vec::with_capacity(active.len());

    for name in active {
        let grad = &analytic[name];
        let base = params.value(name)?.clone();
        let mut errors = Vec::with_capacity(base.len());
        let mut worst = (0, 0.0, 0.0, 0.0);
        for k in 0..base.len() {
            let mut plus = base.data().to_vec();
            plus[k] += h;
            probe.get_mut(name)?.set_value(Tensor::new(base.shape().to_vec(), plus)?)?;
            let f_plus = evaluate(objective, &probe)?.item();
            let mut minus = base.data().to_vec();
            minus[k] -= h;
            probe.get_mut(name)?.set_value(Tensor::new(base.shape().to_vec(), minus)?)?;
            let f_minus = evaluate(objective, &probe)?.item();
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = grad.data()[k];
            let err = relative_error(a, numeric);
            if err > worst.1 || k == 0 {
                worst = (k, err, a, numeric);
            }
            errors.push(err);
        }
        probe.get_mut(name)?.set_value(base)?;
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        checks.push(ParamCheck {
            name: name.to_string(),
            max_rel_error: worst.1,
            mean_rel_error: mean,
            worst_index: worst.0,
            analytic_at_worst: worst.2,
            numeric_at_worst: worst.3,
        });
    }
    let passed = checks.iter().all(|c| c.max_rel_error <= tol);
    Ok(GradCheckReport {
        params: checks,
        tolerance: tol,
        passed,
    })
}
