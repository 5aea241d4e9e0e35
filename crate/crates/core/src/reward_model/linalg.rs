//! Dense vector helpers generic over [`Scalar`]. Matrices are row-major slices.

use super::autodiff::Scalar;

pub fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = a[0] * b[0];
    for i in 1..a.len() {
        acc = acc + a[i] * b[i];
    }
    acc
}

pub fn sum<S: Scalar>(xs: &[S]) -> S {
    let mut acc = S::cst(0.0);
    for &x in xs {
        acc = acc + x;
    }
    acc
}

pub fn norm<S: Scalar>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

/// Unit-length copy, or `None` when the norm is zero.
pub fn normalize<S: Scalar>(a: &[S]) -> Option<Vec<S>> {
    let n = norm(a);
    if !(n.value() > 0.0) {
        return None;
    }
    Some(a.iter().map(|&x| x / n).collect())
}

pub fn cosine<S: Scalar>(a: &[S], b: &[S]) -> Option<S> {
    let na = norm(a);
    let nb = norm(b);
    if !(na.value() > 0.0 && nb.value() > 0.0) {
        return None;
    }
    Some(dot(a, b) / (na * nb))
}

/// `W x` for `W` with `rows x x.len()` entries.
pub fn matvec<S: Scalar>(w: &[S], x: &[S], rows: usize) -> Vec<S> {
    let cols = x.len();
    debug_assert_eq!(w.len(), rows * cols);
    (0..rows).map(|r| dot(&w[r * cols..(r + 1) * cols], x)).collect()
}

pub fn add<S: Scalar>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

pub fn scaled<S: Scalar>(a: &[S], c: S) -> Vec<S> {
    a.iter().map(|&x| x * c).collect()
}

pub fn lift<S: Scalar>(xs: &[f64]) -> Vec<S> {
    xs.iter().map(|&x| S::cst(x)).collect()
}

pub fn values<S: Scalar>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(|x| x.value()).collect()
}

/// Softmax over `logits`, shifted by the max for stability.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().map(|x| x.value()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<S> = logits.iter().map(|&x| (x - S::cst(m)).exp()).collect();
    let z = sum(&exps);
    exps.into_iter().map(|e| e / z).collect()
}

pub fn logsumexp<S: Scalar>(xs: &[S]) -> S {
    let m = xs.iter().map(|x| x.value()).fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<S> = xs.iter().map(|&x| (x - S::cst(m)).exp()).collect();
    S::cst(m) + sum(&shifted).ln()
}

/// Layer normalization to zero mean and unit variance, then `gain * x + shift`.
pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], shift: &[S], eps: f64) -> Vec<S> {
    let n = S::cst(x.len() as f64);
    let mean = sum(x) / n;
    let centered: Vec<S> = x.iter().map(|&v| v - mean).collect();
    let var = dot(&centered, &centered) / n;
    let denom = (var + S::cst(eps)).sqrt();
    centered
        .iter()
        .zip(gain.iter().zip(shift))
        .map(|(&c, (&g, &b))| g * (c / denom) + b)
        .collect()
}

/// Two-layer map `W2 tanh(W1 x + b1) + b2`; biases optional.
pub struct Mlp<'a, S> {
    pub w1: &'a [S],
    pub b1: Option<&'a [S]>,
    pub w2: &'a [S],
    pub b2: Option<&'a [S]>,
    pub hidden: usize,
    pub out: usize,
}

impl<S: Scalar> Mlp<'_, S> {
    pub fn apply(&self, x: &[S]) -> Vec<S> {
        let mut h = matvec(self.w1, x, self.hidden);
        if let Some(b) = self.b1 {
            h = add(&h, b);
        }
        let h: Vec<S> = h.into_iter().map(|v| v.tanh()).collect();
        let y = matvec(self.w2, &h, self.out);
        match self.b2 {
            Some(b) => add(&y, b),
            None => y,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p[0] > p[1] && p[1] > p[2]);
    }

    #[test]
    fn layer_norm_moments() {
        let x = [0.3, -2.0, 5.0, 1.0];
        let y = layer_norm(&x, &[1.0; 4], &[0.0; 4], 0.0);
        let m: f64 = y.iter().sum::<f64>() / 4.0;
        let v: f64 = y.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logsumexp_large_inputs() {
        let v = logsumexp(&[1000.0, 1000.0]);
        assert!((v - (1000.0 + 2f64.ln())).abs() < 1e-9);
    }
}
