//! Policy-gradient training of a [`PolicyTable`] with a chosen advantage
//! estimator.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{rollout_group, Group, PolicyTable};
use super::{Result, SimError, World};
use crate::advantage::{
    clipped_policy_loss, clipped_policy_loss_grad, compute_grpo_advantages, compute_noanchor_advantages,
    compute_parpo_advantages, pers_advantage_terms, AdvantageConfig, AnchorStore, Estimator,
};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: Estimator,
    pub steps: usize,
    pub group_size: usize,
    /// Queries drawn per step; every user rolls out a group on each.
    pub queries_per_step: usize,
    pub step_size: f64,
    pub anchor_decay: f64,
    pub margin_coeff: f64,
    /// Decay of the per-dimension metric EMAs.
    pub metric_decay: f64,
    pub advantage: AdvantageConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Estimator::Parpo,
            steps: 300,
            group_size: 8,
            queries_per_step: 1,
            step_size: 0.5,
            anchor_decay: 0.9,
            margin_coeff: 1.0,
            metric_decay: 0.9,
            // Base rewards span [0, 1] while personalized ones span several
            // units; weight the standardized tracks to match.
            advantage: AdvantageConfig {
                w_base: 0.1,
                w_pers: 0.9,
                ..Default::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.advantage.validate()?;
        if self.group_size == 0 || self.queries_per_step == 0 {
            return Err(SimError::InvalidConfig("group_size and queries_per_step must be positive".into()));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return Err(SimError::InvalidConfig(format!("step_size must be finite and >= 0, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.metric_decay) {
            return Err(SimError::InvalidConfig("metric_decay must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn anchor_store(&self) -> Result<AnchorStore> {
        Ok(AnchorStore::new(self.anchor_decay, self.margin_coeff)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub optimizer: Estimator,
    pub mean_reward: f64,
    pub mean_pers_reward: f64,
    /// Mean absolute gap between the estimator's advantage and the oracle's.
    pub adv_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub trace: Vec<TraceRow>,
    /// Final EMA of each trace column.
    pub ema: BTreeMap<String, f64>,
    /// Noiseless expected personalized reward under the final policy,
    /// averaged over users and queries.
    pub final_pers_reward: f64,
    pub final_total_reward: f64,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r).map_err(|e| SimError::Io(e.into()))?;
    }
    out.flush()?;
    Ok(())
}

/// Average of the noiseless expected rewards (personalized, total).
pub fn expected_rewards(policy: &PolicyTable, world: &World) -> (f64, f64) {
    let mut pers = 0.0;
    let mut total = 0.0;
    for u in 0..world.n_users() {
        for q in 0..world.n_queries() {
            pers += policy.pers_moments(world, u, q).0;
            total += policy.total_moments(world, u, q).0;
        }
    }
    let n = (world.n_users() * world.n_queries()) as f64;
    (pers / n, total / n)
}

/// Advantages used for the update plus the oracle gap, per group.
pub(crate) struct Scored {
    pub advantages: Vec<Vec<f64>>,
    pub abs_errors: Vec<f64>,
}

/// Score all groups of one query for `kind`. Anchors are read, not updated.
pub(crate) fn score_groups(
    kind: Estimator,
    groups: &[Group],
    world: &World,
    policy: &PolicyTable,
    anchors: &AnchorStore,
    cfg: &AdvantageConfig,
) -> Result<Scored> {
    let eps = cfg.epsilon;
    let mut advantages = Vec::with_capacity(groups.len());
    let mut abs_errors = Vec::new();
    match kind {
        Estimator::Grpo => {
            let all: Vec<_> = groups.iter().flat_map(|g| g.records.iter().cloned()).collect();
            let pooled = compute_grpo_advantages(&all, eps, |r| r.total_reward(world.alpha))?;
            let mut at = 0;
            for g in groups {
                let (mu, sigma) = policy.total_moments(world, g.user, g.query);
                let adv = pooled[at..at + g.records.len()].to_vec();
                at += g.records.len();
                for (a, &act) in adv.iter().zip(&g.actions) {
                    let truth_r = world.total(world.base[g.user][g.query][act], world.pers[g.user][g.query][act]);
                    abs_errors.push((a - (truth_r - mu) / (sigma + eps)).abs());
                }
                advantages.push(adv);
            }
        }
        Estimator::Parpo | Estimator::NoAnchor => {
            for g in groups {
                let (mu, sigma) = policy.pers_moments(world, g.user, g.query);
                let (adv, pers) = if kind == Estimator::Parpo {
                    let terms = pers_advantage_terms(&g.records, anchors, cfg)?;
                    (
                        compute_parpo_advantages(&g.records, anchors, cfg)?,
                        terms.into_iter().map(|t| t.advantage).collect::<Vec<_>>(),
                    )
                } else {
                    let p: Vec<f64> = g.records.iter().map(|r| r.reward_pers).collect();
                    (compute_noanchor_advantages(&g.records, cfg)?, stats::standardize(&p, eps))
                };
                for (a, t) in pers.iter().zip(&g.pers_true) {
                    abs_errors.push((a - (t - mu) / (sigma + eps)).abs());
                }
                advantages.push(adv);
            }
        }
    }
    Ok(Scored { advantages, abs_errors })
}

/// Gradient of the clipped loss of one group with respect to its logits.
pub fn logit_gradient(group: &Group, advantages: &[f64], cfg: &AdvantageConfig) -> Result<(f64, Vec<f64>)> {
    let loss = clipped_policy_loss(&group.records, advantages, cfg)?;
    let dr = clipped_policy_loss_grad(&group.records, advantages, cfg)?;
    let mut grad = vec![0.0; group.probs.len()];
    for ((g, &a), rec) in dr.iter().zip(&group.actions).zip(&group.records) {
        // d ratio / d logit_k = ratio * (1[k = a] - pi_k)
        let r = rec.ratio.unwrap_or(1.0);
        for (k, p) in group.probs.iter().enumerate() {
            let ind = if k == a { 1.0 } else { 0.0 };
            grad[k] += g * r * (ind - p);
        }
    }
    Ok((loss, grad))
}

/// Train `policy` in place. Anchors are updated once per step after all
/// advantages are computed, and only for PARPO.
pub fn train(world: &World, policy: &mut PolicyTable, anchors: &mut AnchorStore, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let nq = world.n_queries();
    let per_step = cfg.queries_per_step.min(nq);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut ema: BTreeMap<String, f64> = BTreeMap::new();
    for step in 0..cfg.steps {
        let queries = sample(&mut rng, nq, per_step).into_vec();
        let mut step_records = Vec::new();
        let mut errors = Vec::new();
        let mut updates: Vec<(usize, usize, Vec<f64>)> = Vec::new();
        for &q in &queries {
            let groups = (0..world.n_users())
                .map(|u| rollout_group(policy, world, u, q, cfg.group_size, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let scored = score_groups(cfg.optimizer, &groups, world, policy, anchors, &cfg.advantage)?;
            errors.extend(scored.abs_errors);
            for (g, adv) in groups.iter().zip(&scored.advantages) {
                let (loss, grad) = logit_gradient(g, adv, &cfg.advantage)?;
                if !loss.is_finite() || grad.iter().any(|x| !x.is_finite()) {
                    return Err(SimError::Diverged {
                        step,
                        msg: format!("non-finite loss {loss}"),
                    });
                }
                updates.push((g.user, g.query, grad));
            }
            for g in groups {
                step_records.extend(g.records);
            }
        }
        // Apply after every group is scored so shared logits see one policy.
        for (u, q, grad) in updates {
            for (l, d) in policy.logits_mut(u, q).iter_mut().zip(grad) {
                *l -= cfg.step_size * d;
            }
        }
        if cfg.optimizer == Estimator::Parpo {
            anchors.update_from_records(&step_records)?;
        }
        let row = TraceRow {
            step,
            optimizer: cfg.optimizer,
            mean_reward: stats::mean(&step_records.iter().map(|r| r.total_reward(world.alpha)).collect::<Vec<_>>()),
            mean_pers_reward: stats::mean(&step_records.iter().map(|r| r.reward_pers).collect::<Vec<_>>()),
            adv_error: stats::mean(&errors),
        };
        for (k, v) in [
            ("mean_reward", row.mean_reward),
            ("mean_pers_reward", row.mean_pers_reward),
            ("adv_error", row.adv_error),
        ] {
            let e = ema.entry(k.to_string()).or_insert(v);
            *e = cfg.metric_decay * *e + (1.0 - cfg.metric_decay) * v;
        }
        trace.push(row);
    }
    let (final_pers_reward, final_total_reward) = expected_rewards(policy, world);
    Ok(TrainReport {
        trace,
        ema,
        final_pers_reward,
        final_total_reward,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_env::EnvConfig;

    fn small() -> World {
        World::generate(&EnvConfig {
            population_size: 3,
            query_count: 2,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn zero_step_size_keeps_policy() {
        let w = small();
        let mut p = PolicyTable::uniform(&w, false);
        let cfg = TrainConfig {
            steps: 5,
            step_size: 0.0,
            ..Default::default()
        };
        train(&w, &mut p, &mut cfg.anchor_store().unwrap(), &cfg).unwrap();
        assert_eq!(p, PolicyTable::uniform(&w, false));
    }

    #[test]
    fn equal_advantages_zero_update() {
        let w = small();
        let p = PolicyTable::uniform(&w, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = rollout_group(&p, &w, 0, 0, 5, &mut rng).unwrap();
        let adv = vec![0.0; 5];
        let (_, grad) = logit_gradient(&g, &adv, &AdvantageConfig::default()).unwrap();
        assert!(grad.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn trace_is_deterministic() {
        let w = small();
        let run = |kind| {
            let cfg = TrainConfig {
                optimizer: kind,
                steps: 20,
                seed: 9,
                ..Default::default()
            };
            let mut p = PolicyTable::uniform(&w, false);
            let r = train(&w, &mut p, &mut cfg.anchor_store().unwrap(), &cfg).unwrap();
            let mut buf = Vec::new();
            write_trace_csv(&r.trace, &mut buf).unwrap();
            buf
        };
        for kind in Estimator::ALL {
            assert_eq!(run(kind), run(kind));
        }
        let text = String::from_utf8(run(Estimator::Grpo)).unwrap();
        assert!(text.starts_with("step,optimizer,mean_reward,mean_pers_reward,adv_error\n0,grpo,"));
    }

    #[test]
    fn opposed_pair_personalizes() {
        let w = World::opposed_pair(0.5);
        let cfg = TrainConfig {
            steps: 2000,
            ..Default::default()
        };
        let mut p = PolicyTable::uniform(&w, false);
        train(&w, &mut p, &mut cfg.anchor_store().unwrap(), &cfg).unwrap();
        assert!(p.probs(0, 0)[0] > 0.9, "{:?}", p.probs(0, 0));
        assert!(p.probs(1, 0)[1] > 0.9, "{:?}", p.probs(1, 0));
    }

    #[test]
    fn anchors_only_for_parpo() {
        let w = small();
        for kind in Estimator::ALL {
            let cfg = TrainConfig {
                optimizer: kind,
                steps: 3,
                ..Default::default()
            };
            let mut store = cfg.anchor_store().unwrap();
            train(&w, &mut PolicyTable::uniform(&w, false), &mut store, &cfg).unwrap();
            assert_eq!(store.len(), if kind == Estimator::Parpo { 3 } else { 0 });
        }
    }
}
