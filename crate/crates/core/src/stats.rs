//! Small descriptive-statistics helpers shared by the estimators and the oracle.
//!
//! Everything here uses the population (divide-by-N) convention.

/// Arithmetic mean. Returns `NaN` for an empty slice; callers validate first.
///
/// Summed relative to the first element, so a constant slice returns that
/// constant exactly and its variance is exactly zero.
pub fn mean(xs: &[f64]) -> f64 {
    let Some(&x0) = xs.first() else {
        return f64::NAN;
    };
    x0 + xs.iter().map(|x| x - x0).sum::<f64>() / xs.len() as f64
}

/// Population variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Weighted mean and standard deviation. Weights need not be normalized.
pub fn weighted_moments(xs: &[f64], weights: &[f64]) -> (f64, f64) {
    debug_assert_eq!(xs.len(), weights.len());
    let total: f64 = weights.iter().sum();
    let m = xs.iter().zip(weights).map(|(x, w)| x * w).sum::<f64>() / total;
    let var = xs
        .iter()
        .zip(weights)
        .map(|(x, w)| w * (x - m) * (x - m))
        .sum::<f64>()
        / total;
    (m, var.max(0.0).sqrt())
}

/// Standardize `xs` as `(x - mean) / (std + eps)`.
pub fn standardize(xs: &[f64], eps: f64) -> Vec<f64> {
    let m = mean(xs);
    let s = std_dev(xs);
    xs.iter().map(|x| (x - m) / (s + eps)).collect()
}
