//! Multi-view profile fusion and its self-supervised training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::autodiff::{gradient, Scalar};
use super::linalg::{add, cosine, dot, layer_norm, lift, logsumexp, matvec, softmax, values};
use super::{Result, RewardModelError};

/// The `K` encoded views of one user's profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileViews {
    pub user_id: String,
    pub views: Vec<Vec<f64>>,
}

impl ProfileViews {
    pub fn new(user_id: impl Into<String>, views: Vec<Vec<f64>>) -> Result<Self> {
        let d = views.first().map_or(0, |v| v.len());
        if d == 0 || views.iter().any(|v| v.len() != d) {
            return Err(RewardModelError::DimensionMismatch(
                "profile views must be non-empty and share one dimension".into(),
            ));
        }
        Ok(Self {
            user_id: user_id.into(),
            views,
        })
    }

    pub fn dim(&self) -> usize {
        self.views[0].len()
    }
}

/// Attention fusion, output projection, layer norm and per-view reconstruction
/// heads, stored as one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    pub d: usize,
    pub d_attn: usize,
    pub n_views: usize,
    pub values: Vec<f64>,
    /// Contrastive temperature.
    pub tau: f64,
    pub ln_eps: f64,
}

/// Offsets of each block inside [`FusionParams::values`].
struct Offsets {
    w_attn: usize,
    b_attn: usize,
    w: usize,
    w_out: usize,
    rec: usize,
    gain: usize,
    shift: usize,
    end: usize,
}

impl FusionParams {
    fn offsets(d: usize, d_attn: usize, k: usize) -> Offsets {
        let w_attn = 0;
        let b_attn = w_attn + d_attn * d;
        let w = b_attn + d_attn;
        let w_out = w + d_attn;
        let rec = w_out + d * d;
        let gain = rec + k * (d * d + d);
        let shift = gain + d;
        Offsets {
            w_attn,
            b_attn,
            w,
            w_out,
            rec,
            gain,
            shift,
            end: shift + d,
        }
    }

    pub fn param_count(d: usize, d_attn: usize, n_views: usize) -> usize {
        Self::offsets(d, d_attn, n_views).end
    }

    /// Gaussian init with `1/sqrt(fan_in)` scale, unit gain and zero shift.
    pub fn init(d: usize, d_attn: usize, n_views: usize, tau: f64, seed: u64) -> Result<Self> {
        if d == 0 || d_attn == 0 || n_views == 0 || !(tau > 0.0) {
            return Err(RewardModelError::InvalidConfig(
                "fusion needs positive dimensions, view count and temperature".into(),
            ));
        }
        let o = Self::offsets(d, d_attn, n_views);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let mut values: Vec<f64> = (0..o.end).map(|_| normal.sample(&mut rng)).collect();
        values[o.b_attn..o.w].fill(0.0);
        values[o.gain..o.shift].fill(1.0);
        values[o.shift..o.end].fill(0.0);
        Ok(Self {
            d,
            d_attn,
            n_views,
            values,
            tau,
            ln_eps: 1e-5,
        })
    }

    pub fn from_values(d: usize, d_attn: usize, n_views: usize, values: Vec<f64>, tau: f64) -> Result<Self> {
        if values.len() != Self::param_count(d, d_attn, n_views) {
            return Err(RewardModelError::DimensionMismatch(format!(
                "expected {} fusion parameters, got {}",
                Self::param_count(d, d_attn, n_views),
                values.len()
            )));
        }
        Ok(Self {
            d,
            d_attn,
            n_views,
            values,
            tau,
            ln_eps: 1e-5,
        })
    }

    fn check_views(&self, views: &ProfileViews) -> Result<()> {
        if views.dim() != self.d {
            return Err(RewardModelError::DimensionMismatch(format!(
                "view dimension {} does not match fusion dimension {}",
                views.dim(),
                self.d
            )));
        }
        Ok(())
    }

    /// Attention over `views` and the layer-normalized projection of their
    /// weighted sum.
    fn fuse_with<S: Scalar>(&self, p: &[S], views: &[&[f64]]) -> (Vec<S>, Vec<S>) {
        let o = Self::offsets(self.d, self.d_attn, self.n_views);
        let scores: Vec<S> = views
            .iter()
            .map(|h| {
                let h = lift::<S>(h);
                let pre = add(&matvec(&p[o.w_attn..o.b_attn], &h, self.d_attn), &p[o.b_attn..o.w]);
                let act: Vec<S> = pre.into_iter().map(|v| v.tanh()).collect();
                dot(&p[o.w..o.w_out], &act)
            })
            .collect();
        let alpha = softmax(&scores);
        let mut mixed = vec![S::cst(0.0); self.d];
        for (a, h) in alpha.iter().zip(views) {
            for (m, &x) in mixed.iter_mut().zip(h.iter()) {
                *m = *m + *a * S::cst(x);
            }
        }
        let projected = matvec(&p[o.w_out..o.rec], &mixed, self.d);
        let out = layer_norm(&projected, &p[o.gain..o.shift], &p[o.shift..o.end], self.ln_eps);
        (out, alpha)
    }

    /// Reconstruction of view `k` from a fused profile.
    fn reconstruct<S: Scalar>(&self, p: &[S], fused: &[S], k: usize) -> Vec<S> {
        let o = Self::offsets(self.d, self.d_attn, self.n_views);
        let base = o.rec + k * (self.d * self.d + self.d);
        let w = &p[base..base + self.d * self.d];
        let b = &p[base + self.d * self.d..base + self.d * self.d + self.d];
        add(&matvec(w, fused, self.d), b)
    }
}

/// Attention weights over the views of one user.
pub fn attention_weights(views: &ProfileViews, params: &FusionParams) -> Result<Vec<f64>> {
    params.check_views(views)?;
    let refs: Vec<&[f64]> = views.views.iter().map(|v| v.as_slice()).collect();
    Ok(params.fuse_with::<f64>(&params.values, &refs).1)
}

/// Fused profile embedding `LayerNorm(W_out sum_k alpha_k h_k)`.
pub fn fuse_profile(views: &ProfileViews, params: &FusionParams) -> Result<Vec<f64>> {
    params.check_views(views)?;
    let refs: Vec<&[f64]> = views.views.iter().map(|v| v.as_slice()).collect();
    Ok(params.fuse_with::<f64>(&params.values, &refs).0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Loss<S> {
    pub infonce: S,
    pub recon: S,
    pub total: S,
}

impl<S: Scalar> Stage1Loss<S> {
    pub fn values(&self) -> Stage1Loss<f64> {
        Stage1Loss {
            infonce: self.infonce.value(),
            recon: self.recon.value(),
            total: self.total.value(),
        }
    }
}

/// `positives[u]` lists the view indices re-fused to form user `u`'s positive.
/// `None` uses every view, so the positive equals the anchor.
fn stage1_terms<S: Scalar>(
    params: &FusionParams,
    p: &[S],
    batch: &[ProfileViews],
    positives: Option<&[Vec<usize>]>,
    lambda_recon: f64,
) -> Result<Stage1Loss<S>> {
    if batch.len() < 2 {
        return Err(RewardModelError::BatchTooSmall(batch.len()));
    }
    if let Some(pos) = positives {
        if pos.len() != batch.len() {
            return Err(RewardModelError::DimensionMismatch("one positive view set per user".into()));
        }
    }
    let mut anchors = Vec::with_capacity(batch.len());
    let mut positive = Vec::with_capacity(batch.len());
    let mut recon = S::cst(0.0);
    for (u, views) in batch.iter().enumerate() {
        params.check_views(views)?;
        let all: Vec<&[f64]> = views.views.iter().map(|v| v.as_slice()).collect();
        let (fused, _) = params.fuse_with(p, &all);
        let pos = match positives {
            None => fused.clone(),
            Some(sets) => {
                let subset: Vec<&[f64]> = sets[u]
                    .iter()
                    .map(|&k| {
                        all.get(k).copied().ok_or_else(|| {
                            RewardModelError::DimensionMismatch(format!("view index {k} out of range"))
                        })
                    })
                    .collect::<Result<_>>()?;
                if subset.is_empty() {
                    return Err(RewardModelError::DimensionMismatch("empty positive view set".into()));
                }
                params.fuse_with(p, &subset).0
            }
        };
        for (k, h) in views.views.iter().enumerate().take(params.n_views) {
            let r = params.reconstruct(p, &fused, k);
            for (&a, &b) in r.iter().zip(h) {
                let e = a - S::cst(b);
                recon = recon + e * e;
            }
        }
        anchors.push(fused);
        positive.push(pos);
    }
    let inv_tau = 1.0 / params.tau;
    let mut infonce = S::cst(0.0);
    for (u, a) in anchors.iter().enumerate() {
        let sims: Vec<S> = positive
            .iter()
            .map(|v| cosine(a, v).map(|c| c.scale(inv_tau)).ok_or(RewardModelError::DegenerateEmbedding))
            .collect::<Result<_>>()?;
        infonce = infonce + logsumexp(&sims) - sims[u];
    }
    Ok(Stage1Loss {
        infonce,
        recon,
        total: infonce + recon.scale(lambda_recon),
    })
}

pub fn stage1_loss(
    batch: &[ProfileViews],
    positives: Option<&[Vec<usize>]>,
    params: &FusionParams,
    lambda_recon: f64,
) -> Result<Stage1Loss<f64>> {
    stage1_terms(params, &params.values, batch, positives, lambda_recon)
}

/// Gradient of one stage-1 quantity with respect to all fusion parameters.
pub fn stage1_gradient(
    batch: &[ProfileViews],
    positives: Option<&[Vec<usize>]>,
    params: &FusionParams,
    lambda_recon: f64,
    pick: fn(&Stage1Loss<super::autodiff::Var>) -> super::autodiff::Var,
) -> Result<(f64, Vec<f64>)> {
    let mut err = None;
    let out = gradient(&params.values, |p| match stage1_terms(params, p, batch, positives, lambda_recon) {
        Ok(l) => pick(&l),
        Err(e) => {
            err = Some(e);
            super::autodiff::Var::cst(f64::NAN)
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Each view survives with probability `keep`; at least one always does.
pub fn view_dropout<R: Rng>(n_views: usize, keep: f64, rng: &mut R) -> Vec<usize> {
    let mut kept: Vec<usize> = (0..n_views).filter(|_| rng.random::<f64>() < keep).collect();
    if kept.is_empty() {
        kept.push(rng.random_range(0..n_views));
    }
    kept
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    pub lambda_recon: f64,
    pub view_keep: f64,
    pub seed: u64,
}

impl Default for Stage1TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            step_size: 0.05,
            lambda_recon: 0.1,
            view_keep: 0.5,
            seed: 0,
        }
    }
}

/// Gradient descent on the stage-1 objective with fresh view-dropout
/// positives each step. Returns the loss before each step.
pub fn train_stage1(params: &mut FusionParams, batch: &[ProfileViews], cfg: &Stage1TrainConfig) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let positives: Vec<Vec<usize>> = batch
            .iter()
            .map(|v| view_dropout(v.views.len(), cfg.view_keep, &mut rng))
            .collect();
        let (loss, grad) = stage1_gradient(batch, Some(&positives), params, cfg.lambda_recon, |l| l.total)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(RewardModelError::Diverged { step, loss });
        }
        trace.push(loss);
        for (w, g) in params.values.iter_mut().zip(&grad) {
            *w -= cfg.step_size * g;
        }
    }
    Ok(trace)
}

/// Fused embeddings for a whole batch, as plain vectors.
pub fn fuse_batch(batch: &[ProfileViews], params: &FusionParams) -> Result<Vec<Vec<f64>>> {
    batch
        .iter()
        .map(|v| fuse_profile(v, params).map(|f| values(&f)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_params(d: usize, k: usize) -> FusionParams {
        let mut p = FusionParams::init(d, 2, k, 1.0, 7).unwrap();
        let o = FusionParams::offsets(d, 2, k);
        for r in 0..d {
            for c in 0..d {
                p.values[o.w_out + r * d + c] = if r == c { 1.0 } else { 0.0 };
            }
        }
        p.ln_eps = 0.0;
        p
    }

    #[test]
    fn single_view_weight_is_one() {
        let p = FusionParams::init(4, 3, 1, 1.0, 1).unwrap();
        let v = ProfileViews::new("a", vec![vec![0.3, -1.0, 2.0, 0.5]]).unwrap();
        assert_eq!(attention_weights(&v, &p).unwrap(), vec![1.0]);
    }

    #[test]
    fn identical_views_split_evenly() {
        let p = FusionParams::init(3, 2, 2, 1.0, 2).unwrap();
        let h = vec![1.0, 2.0, -0.5];
        let w = attention_weights(&ProfileViews::new("a", vec![h.clone(), h]).unwrap(), &p).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn orthogonal_pair_infonce() {
        let p = identity_params(4, 1);
        let batch = vec![
            ProfileViews::new("a", vec![vec![1.0, 1.0, -1.0, -1.0]]).unwrap(),
            ProfileViews::new("b", vec![vec![1.0, -1.0, 1.0, -1.0]]).unwrap(),
        ];
        let l = stage1_loss(&batch, None, &p, 0.0).unwrap();
        let expect = 2.0 * (-1f64).softplus();
        assert!((l.infonce - expect).abs() < 1e-12, "{} vs {}", l.infonce, expect);
        assert_eq!(l.total, l.infonce);
    }

    #[test]
    fn batch_of_one_rejected() {
        let p = FusionParams::init(2, 2, 1, 1.0, 0).unwrap();
        let batch = vec![ProfileViews::new("a", vec![vec![1.0, 0.0]]).unwrap()];
        assert!(matches!(stage1_loss(&batch, None, &p, 1.0), Err(RewardModelError::BatchTooSmall(1))));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = FusionParams::init(3, 2, 1, 1.0, 0).unwrap();
        let v = ProfileViews::new("a", vec![vec![1.0, 0.0]]).unwrap();
        assert!(matches!(fuse_profile(&v, &p), Err(RewardModelError::DimensionMismatch(_))));
        assert!(ProfileViews::new("a", vec![vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
