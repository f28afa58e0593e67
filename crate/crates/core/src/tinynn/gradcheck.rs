//! Central finite-difference gradient checking.

use super::params::{flatten, param_count, scalar_owner, set_scalar, Parameters};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Relative error with an absolute floor so that vanishing gradients compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares `analytic` against central differences of `loss` at every scalar
/// parameter of `model` (or every `stride`-th one).
pub fn check<P, F>(model: &P, analytic: &P, loss: F, h: f64, stride: usize) -> GradCheckReport
where
    P: Parameters + Clone,
    F: Fn(&P) -> f64,
{
    let g = flatten(analytic);
    let n = param_count(model);
    assert_eq!(g.len(), n, "gradient container does not match model");
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for i in (0..n).step_by(stride.max(1)) {
        let orig = set_scalar(&mut probe, i, f64::NAN);
        set_scalar(&mut probe, i, orig + h);
        let up = loss(&probe);
        set_scalar(&mut probe, i, orig - h);
        let down = loss(&probe);
        set_scalar(&mut probe, i, orig);
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(g[i], numeric);
        report.checked += 1;
        if e > report.max_rel_err || report.worst.is_empty() {
            report.max_rel_err = e;
            report.worst = scalar_owner(model, i);
            report.worst_analytic = g[i];
            report.worst_numeric = numeric;
        }
    }
    report
}
