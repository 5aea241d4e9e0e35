//! Read-only scoring of candidate actions for a user.

use serde::{Deserialize, Serialize};

use super::cf::{CfModel, Encoder, UserEmbedding};
use super::linalg::{cosine, dot, normalize, softmax, Mlp};
use super::{Result, RewardModelError};

/// Softmax temperature over text-space neighbors.
pub const NEIGHBOR_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_K_NN: usize = 5;

/// Frozen embeddings of a trained model. Safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    dim: usize,
    items_cf: Vec<Vec<f64>>,
    users: Vec<UserEmbedding>,
    action_params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActionEmbedding {
    pub neighbors: Vec<usize>,
    pub weights: Vec<f64>,
    pub a_cf: Vec<f64>,
    pub a_proj: Vec<f64>,
    pub a_final: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ActionScores {
    pub r_int: f64,
    pub r_conf: f64,
    pub r_fused: f64,
}

impl Scorer {
    pub fn from_model(model: &CfModel) -> Result<Self> {
        let (_, items_cf) = model.propagate();
        let enc = model.encoder(&model.params, Encoder::Action);
        let mut action_params = enc.w1.to_vec();
        action_params.extend_from_slice(enc.b1.unwrap_or(&[]));
        action_params.extend_from_slice(enc.w2);
        action_params.extend_from_slice(enc.b2.unwrap_or(&[]));
        Ok(Self {
            dim: model.dim,
            items_cf,
            users: model.user_embeddings()?,
            action_params,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn item_embedding(&self, item: usize) -> Option<&[f64]> {
        self.items_cf.get(item).map(|v| v.as_slice())
    }

    pub fn user(&self, user: usize) -> Result<&UserEmbedding> {
        self.users
            .get(user)
            .ok_or_else(|| RewardModelError::UnknownIndex(format!("user {user}")))
    }

    fn project(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let p = &self.action_params;
        Mlp {
            w1: &p[..d * d],
            b1: Some(&p[d * d..d * d + d]),
            w2: &p[d * d + d..2 * d * d + d],
            b2: Some(&p[2 * d * d + d..]),
            hidden: d,
            out: d,
        }
        .apply(x)
    }

    /// Blend of the text-neighbor collaborative embedding and the projected
    /// action vector, each normalized, with equal weight.
    pub fn infer_action_embedding(
        &self,
        action_vector: &[f64],
        item_text: &[Vec<f64>],
        k_nn: usize,
    ) -> Result<ActionEmbedding> {
        if item_text.is_empty() || self.items_cf.is_empty() {
            return Err(RewardModelError::EmptyItems);
        }
        if k_nn == 0 {
            return Err(RewardModelError::InvalidConfig("k_nn must be at least 1".into()));
        }
        if item_text.len() != self.items_cf.len()
            || action_vector.len() != self.dim
            || item_text.iter().any(|t| t.len() != self.dim)
        {
            return Err(RewardModelError::DimensionMismatch(
                "action and item text vectors must match the model".into(),
            ));
        }
        let sims: Vec<f64> = item_text
            .iter()
            .map(|t| cosine(action_vector, t).ok_or(RewardModelError::DegenerateEmbedding))
            .collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order.truncate(k_nn);
        let logits: Vec<f64> = order.iter().map(|&j| sims[j] / NEIGHBOR_TEMPERATURE).collect();
        let weights = softmax(&logits);
        let mut a_cf = vec![0.0; self.dim];
        for (&j, &w) in order.iter().zip(&weights) {
            for (a, x) in a_cf.iter_mut().zip(&self.items_cf[j]) {
                *a += w * x;
            }
        }
        let a_proj = self.project(action_vector);
        let cf_hat = normalize(&a_cf).ok_or(RewardModelError::DegenerateEmbedding)?;
        let proj_hat = normalize(&a_proj).ok_or(RewardModelError::DegenerateEmbedding)?;
        let a_final = cf_hat.iter().zip(&proj_hat).map(|(c, p)| 0.5 * c + 0.5 * p).collect();
        Ok(ActionEmbedding {
            neighbors: order,
            weights,
            a_cf,
            a_proj,
            a_final,
        })
    }

    /// Cosine of the user's unit branch and fused embeddings with the action.
    pub fn score_action(&self, user: usize, action_embedding: &[f64]) -> Result<ActionScores> {
        let u = self.user(user)?;
        if action_embedding.len() != self.dim || action_embedding.iter().any(|x| !x.is_finite()) {
            return Err(RewardModelError::DimensionMismatch("action embedding".into()));
        }
        let a = normalize(action_embedding).ok_or(RewardModelError::DegenerateEmbedding)?;
        let s = |v: &[f64]| dot(v, &a).clamp(-1.0, 1.0);
        Ok(ActionScores {
            r_int: s(&u.int_hat),
            r_conf: s(&u.conf_hat),
            r_fused: s(&u.fused),
        })
    }
}

/// Training-distribution statistics of the branch scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub mu_int: f64,
    pub sigma_int: f64,
    pub mu_conf: f64,
    pub sigma_conf: f64,
}

impl RewardStats {
    pub fn new(mu_int: f64, sigma_int: f64, mu_conf: f64, sigma_conf: f64) -> Result<Self> {
        if !(sigma_int > 0.0 && sigma_conf > 0.0) || !mu_int.is_finite() || !mu_conf.is_finite() {
            return Err(RewardModelError::InvalidConfig("reward stats need finite means and positive sigmas".into()));
        }
        Ok(Self {
            mu_int,
            sigma_int,
            mu_conf,
            sigma_conf,
        })
    }

    /// Population moments of observed `(r_int, r_conf)` scores.
    pub fn fit(scores: &[ActionScores]) -> Result<Self> {
        if scores.is_empty() {
            return Err(RewardModelError::InvalidConfig("no scores to fit".into()));
        }
        let ints: Vec<f64> = scores.iter().map(|s| s.r_int).collect();
        let confs: Vec<f64> = scores.iter().map(|s| s.r_conf).collect();
        Self::new(
            crate::stats::mean(&ints),
            crate::stats::std_dev(&ints),
            crate::stats::mean(&confs),
            crate::stats::std_dev(&confs),
        )
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `sigmoid((r - mu) / sigma)` for each branch.
pub fn normalize_scores(stats: &RewardStats, r_int: f64, r_conf: f64) -> (f64, f64) {
    (
        sigmoid((r_int - stats.mu_int) / stats.sigma_int),
        sigmoid((r_conf - stats.mu_conf) / stats.sigma_conf),
    )
}
