//! Central finite-difference gradient checking.

use serde::Serialize;

/// Denominator floor so near-zero components are compared absolutely.
const FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Compare `analytic` with `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// coordinate. The error is `|a - n| / max(|a|, |n|, 1e-5)`.
pub fn check<F>(x: &[f64], analytic: &[f64], h: f64, rtol: f64, mut f: F) -> GradCheckReport
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        let worse = err.is_nan() || err > report.max_rel_error;
        if worse && !report.max_rel_error.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = a;
            report.numeric = numeric;
        }
    }
    report.passed = report.max_rel_error <= rtol;
    report
}
