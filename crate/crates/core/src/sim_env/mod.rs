//! Synthetic multi-user bandit environment with controllable preference
//! heterogeneity, plus training loops that compare advantage estimators.
//!
//! Each episode is one step: the policy picks one of a query's candidate
//! trajectories and receives a base reward shared by all users and a
//! personalized reward `scale_u * p_u . phi + offset_u` with optional noise.

pub mod compare;
pub mod policy;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::advantage::AdvantageError;
use crate::bias_oracle::{OracleError, Slice, UserRewardTable};

pub use compare::{compare_optimizers, warm_anchors, CompareConfig, CompareReport};
pub use policy::{rollout_group, Group, PolicyTable};
pub use train::{train, TraceRow, TrainConfig, TrainReport};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown user index {0}")]
    UnknownUser(usize),
    #[error("unknown query index {0}")]
    UnknownQuery(usize),
    #[error("training diverged at step {step}: {msg}")]
    Diverged { step: usize, msg: String },
    #[error(transparent)]
    Advantage(#[from] AdvantageError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

/// SplitMix64 step, used to derive independent sub-seeds from one run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    /// Weight of the base reward in the total reward.
    pub alpha_mix: f64,
    pub noise_std: f64,
    pub heterogeneity_level: f64,
    pub population_size: usize,
    pub query_count: usize,
    pub candidate_count: usize,
    pub feature_dim: usize,
    pub seed: u64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            alpha_mix: 0.5,
            noise_std: 0.1,
            heterogeneity_level: 1.0,
            population_size: 8,
            query_count: 4,
            candidate_count: 4,
            feature_dim: 4,
            seed: 0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(SimError::InvalidConfig(m.into()));
        if self.candidate_count < 2 {
            return bad("candidate_count must be at least 2");
        }
        if self.population_size == 0 || self.query_count == 0 || self.feature_dim == 0 {
            return bad("population_size, query_count and feature_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.alpha_mix) {
            return bad("alpha_mix must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(self.heterogeneity_level >= 0.0 && self.heterogeneity_level.is_finite()) {
            return bad("heterogeneity_level must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticUser {
    pub user_id: String,
    pub preference: Vec<f64>,
    pub conformity_weight: f64,
    pub reward_scale: f64,
    pub reward_offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticQuery {
    pub query_id: String,
    pub candidates: Vec<Vec<f64>>,
    pub base_quality: Vec<f64>,
}

/// Noiseless reward tables plus the generating profiles when known.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub alpha: f64,
    pub noise_std: f64,
    pub users: Vec<SyntheticUser>,
    pub queries: Vec<SyntheticQuery>,
    /// `[user][query][candidate]`.
    pub base: Vec<Vec<Vec<f64>>>,
    pub pers: Vec<Vec<Vec<f64>>>,
}

/// Rewards of one sampled candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub base: f64,
    pub pers: f64,
    /// Noiseless personalized reward.
    pub pers_true: f64,
}

impl World {
    pub fn generate(cfg: &EnvConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let h = cfg.heterogeneity_level;
        let d = cfg.feature_dim;
        let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let shared: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
        let mut users = Vec::with_capacity(cfg.population_size);
        for u in 0..cfg.population_size {
            let preference = shared.iter().map(|p| p + h * normal(&mut rng)).collect();
            let reward_offset = h * normal(&mut rng);
            let log_span = (1.0 + h).ln();
            let reward_scale = if h > 0.0 {
                (rng.random_range(-log_span..=log_span)).exp()
            } else {
                1.0
            };
            users.push(SyntheticUser {
                user_id: format!("u{u}"),
                preference,
                conformity_weight: rng.random::<f64>(),
                reward_scale,
                reward_offset,
            });
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let queries: Vec<SyntheticQuery> = (0..cfg.query_count)
            .map(|q| {
                let mut cands: Vec<Vec<f64>> = (0..cfg.candidate_count)
                    .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng2)).collect())
                    .collect();
                // Center so every user's mean reward under a uniform policy is its offset.
                for k in 0..d {
                    let m = cands.iter().map(|c| c[k]).sum::<f64>() / cands.len() as f64;
                    for c in &mut cands {
                        c[k] -= m;
                    }
                }
                SyntheticQuery {
                    query_id: format!("q{q}"),
                    base_quality: (0..cfg.candidate_count).map(|_| rng2.random::<f64>()).collect(),
                    candidates: cands,
                }
            })
            .collect();
        Ok(Self::from_profiles(users, queries, cfg.alpha_mix, cfg.noise_std))
    }

    pub fn from_profiles(users: Vec<SyntheticUser>, queries: Vec<SyntheticQuery>, alpha: f64, noise_std: f64) -> Self {
        let base = users
            .iter()
            .map(|_| queries.iter().map(|q| q.base_quality.clone()).collect())
            .collect();
        let pers = users
            .iter()
            .map(|u| {
                queries
                    .iter()
                    .map(|q| {
                        q.candidates
                            .iter()
                            .map(|phi| {
                                let dot: f64 = u.preference.iter().zip(phi).map(|(a, b)| a * b).sum();
                                u.reward_scale * dot + u.reward_offset
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Self {
            alpha,
            noise_std,
            users,
            queries,
            base,
            pers,
        }
    }

    /// Two users, one query, two candidates: the first user prefers candidate
    /// 0, the second candidate 1, with different reward scales and offsets.
    pub fn opposed_pair(noise_std: f64) -> Self {
        let users = vec![
            SyntheticUser {
                user_id: "u0".into(),
                preference: vec![1.0],
                conformity_weight: 0.0,
                reward_scale: 1.0,
                reward_offset: 0.0,
            },
            SyntheticUser {
                user_id: "u1".into(),
                preference: vec![-1.0],
                conformity_weight: 0.0,
                reward_scale: 3.0,
                reward_offset: 2.0,
            },
        ];
        let queries = vec![SyntheticQuery {
            query_id: "q0".into(),
            candidates: vec![vec![0.5], vec![-0.5]],
            base_quality: vec![0.5, 0.5],
        }];
        Self::from_profiles(users, queries, 0.5, noise_std)
    }

    pub fn n_users(&self) -> usize {
        self.pers.len()
    }

    pub fn n_queries(&self) -> usize {
        self.pers.first().map_or(0, |r| r.len())
    }

    pub fn n_candidates(&self, query: usize) -> usize {
        self.pers[0][query].len()
    }

    pub fn user_id(&self, u: usize) -> String {
        self.users.get(u).map_or_else(|| format!("u{u}"), |x| x.user_id.clone())
    }

    pub fn query_id(&self, q: usize) -> String {
        self.queries.get(q).map_or_else(|| format!("q{q}"), |x| x.query_id.clone())
    }

    pub(crate) fn check(&self, user: usize, query: usize) -> Result<()> {
        if user >= self.n_users() {
            return Err(SimError::UnknownUser(user));
        }
        if query >= self.n_queries() {
            return Err(SimError::UnknownQuery(query));
        }
        Ok(())
    }

    pub fn observe<R: Rng>(&self, user: usize, query: usize, cand: usize, rng: &mut R) -> Observation {
        let pers_true = self.pers[user][query][cand];
        let noise = if self.noise_std > 0.0 {
            Normal::new(0.0, self.noise_std).expect("valid std").sample(rng)
        } else {
            0.0
        };
        Observation {
            base: self.base[user][query][cand],
            pers: pers_true + noise,
            pers_true,
        }
    }

    pub fn total(&self, base: f64, pers: f64) -> f64 {
        self.alpha * base + (1.0 - self.alpha) * pers
    }

    /// Noiseless ground truth in the oracle's table format.
    pub fn ground_truth(&self) -> Result<UserRewardTable> {
        let users = (0..self.n_users()).map(|u| self.user_id(u)).collect();
        let queries = (0..self.n_queries()).map(|q| self.query_id(q)).collect();
        let slices = (0..self.n_users())
            .map(|u| {
                (0..self.n_queries())
                    .map(|q| Slice {
                        trajectory_ids: (0..self.n_candidates(q)).map(|c| format!("c{c}")).collect(),
                        base: self.base[u][q].clone(),
                        pers: self.pers[u][q].clone(),
                    })
                    .collect()
            })
            .collect();
        Ok(UserRewardTable::new(users, queries, slices, self.alpha)?)
    }

    /// Rebuild from an exported table. Generating profiles are not recoverable.
    pub fn from_table(table: &UserRewardTable, noise_std: f64) -> Result<Self> {
        let nq = table.queries().len();
        let mut base = Vec::new();
        let mut pers = Vec::new();
        for u in 0..table.users().len() {
            let mut b = Vec::with_capacity(nq);
            let mut p = Vec::with_capacity(nq);
            for q in 0..nq {
                let s = table.slice(u, q)?;
                if s.trajectory_ids != table.slice(0, q)?.trajectory_ids || s.pers.len() < 2 {
                    return Err(SimError::InvalidConfig(format!(
                        "query {} needs the same two or more candidates for every user",
                        table.queries()[q]
                    )));
                }
                b.push(s.base.clone());
                p.push(s.pers.clone());
            }
            base.push(b);
            pers.push(p);
        }
        let users = table
            .users()
            .iter()
            .map(|id| SyntheticUser {
                user_id: id.clone(),
                preference: Vec::new(),
                conformity_weight: 0.0,
                reward_scale: 1.0,
                reward_offset: 0.0,
            })
            .collect();
        let queries = table
            .queries()
            .iter()
            .map(|id| SyntheticQuery {
                query_id: id.clone(),
                candidates: Vec::new(),
                base_quality: Vec::new(),
            })
            .collect();
        Ok(Self {
            alpha: table.alpha(),
            noise_std,
            users,
            queries,
            base,
            pers,
        })
    }

    /// Probability that `user` prefers candidate 0 over candidate 1 of
    /// `query` under Gaussian reward noise; a step function without noise.
    pub fn preference_probability(&self, user: usize, query: usize) -> f64 {
        let diff = self.pers[user][query][0] - self.pers[user][query][1];
        if self.noise_std > 0.0 {
            use statrs::distribution::{ContinuousCDF, Normal as StatNormal};
            let n = StatNormal::new(0.0, 1.0).expect("standard normal");
            n.cdf(diff / (std::f64::consts::SQRT_2 * self.noise_std))
        } else if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            0.0
        } else {
            0.5
        }
    }

    /// Implicit feedback: each user interacts with the candidate maximizing a
    /// blend of its own reward rank and the shared base quality, weighted by
    /// its conformity. Items are `query:candidate` ids.
    pub fn synthesize_interactions(&self) -> Vec<(String, String, f64)> {
        let mut out = Vec::new();
        for u in 0..self.n_users() {
            let c = self.users.get(u).map_or(0.0, |x| x.conformity_weight);
            for q in 0..self.n_queries() {
                let p = &self.pers[u][q];
                let (lo, hi) = p.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
                let span = if hi > lo { hi - lo } else { 1.0 };
                let best = (0..p.len())
                    .max_by(|&a, &b| {
                        let sa = (1.0 - c) * (p[a] - lo) / span + c * self.base[u][q][a];
                        let sb = (1.0 - c) * (p[b] - lo) / span + c * self.base[u][q][b];
                        sa.total_cmp(&sb).then(b.cmp(&a))
                    })
                    .expect("at least two candidates");
                out.push((self.user_id(u), format!("{}:c{best}", self.query_id(q)), 1.0));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bias_oracle::heterogeneity;

    #[test]
    fn deterministic_generation() {
        let cfg = EnvConfig {
            seed: 42,
            ..Default::default()
        };
        assert_eq!(World::generate(&cfg).unwrap(), World::generate(&cfg).unwrap());
        let other = World::generate(&EnvConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(World::generate(&EnvConfig { seed: 42, ..Default::default() }).unwrap(), other);
    }

    #[test]
    fn zero_heterogeneity_is_homogeneous() {
        let w = World::generate(&EnvConfig {
            heterogeneity_level: 0.0,
            ..Default::default()
        })
        .unwrap();
        let t = w.ground_truth().unwrap();
        let grouping: Vec<usize> = (0..w.n_users()).collect();
        for q in 0..w.n_queries() {
            assert_eq!(heterogeneity(&t, &grouping, q, None).unwrap().h_global, 0.0);
        }
    }

    #[test]
    fn uniform_mean_is_offset() {
        let w = World::generate(&EnvConfig::default()).unwrap();
        for (u, user) in w.users.iter().enumerate() {
            for q in 0..w.n_queries() {
                let m = w.pers[u][q].iter().sum::<f64>() / w.n_candidates(q) as f64;
                assert!((m - user.reward_offset).abs() < 1e-12);
            }
            let lim = 1.0 + 1.0;
            assert!(user.reward_scale >= 1.0 / lim - 1e-12 && user.reward_scale <= lim + 1e-12);
        }
    }

    #[test]
    fn too_few_candidates() {
        let cfg = EnvConfig {
            candidate_count: 1,
            ..Default::default()
        };
        assert!(matches!(World::generate(&cfg), Err(SimError::InvalidConfig(_))));
    }

    #[test]
    fn table_round_trip_world() {
        let w = World::generate(&EnvConfig::default()).unwrap();
        let t = w.ground_truth().unwrap();
        let back = World::from_table(&t, w.noise_std).unwrap();
        assert_eq!(back.pers, w.pers);
        assert_eq!(back.base, w.base);
    }

    #[test]
    fn opposed_preferences() {
        let w = World::opposed_pair(0.5);
        assert!(w.preference_probability(0, 0) > 0.5);
        assert!(w.preference_probability(1, 0) < 0.5);
        assert_eq!(World::opposed_pair(0.0).preference_probability(0, 0), 1.0);
    }
}
