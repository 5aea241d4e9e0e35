//! Matched-seed comparisons of advantage estimators on generated worlds.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::policy::{rollout_group, PolicyTable};
use super::train::{score_groups, train, TrainConfig};
use super::{derive_seed, EnvConfig, Result, SimError, World};
use crate::advantage::{AnchorStore, Estimator};
use crate::bias_oracle::{personalization_gap, PreferencePair};
use crate::stats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareConfig {
    pub optimizers: Vec<Estimator>,
    pub trials: usize,
    /// Anchor batches under the uniform policy before errors are measured.
    pub warmup_batches: usize,
    pub measure_batches: usize,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            optimizers: Estimator::ALL.to_vec(),
            trials: 20,
            warmup_batches: 20,
            measure_batches: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    /// Mean |estimated - oracle| personalized advantage under the uniform policy.
    pub adv_error: BTreeMap<Estimator, f64>,
    /// Noiseless expected personalized reward after training.
    pub final_pers_reward: BTreeMap<Estimator, f64>,
    /// Mean over users of |anchor mean - true policy mean| after PARPO training.
    pub anchor_drift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareReport {
    pub trials: Vec<TrialResult>,
    pub mean_adv_error: BTreeMap<Estimator, f64>,
    pub mean_final_pers_reward: BTreeMap<Estimator, f64>,
    /// Trials where PARPO's advantage error is strictly below GRPO's.
    pub parpo_error_wins: usize,
    /// Trials with final reward ordered PARPO >= noanchor >= GRPO.
    pub ordering_holds: usize,
}

/// Anchors after `batches` uniform-policy batches; each batch draws one query
/// and a group of `tcfg.group_size` rollouts per user.
pub fn warm_anchors<R: Rng>(world: &World, tcfg: &TrainConfig, batches: usize, rng: &mut R) -> Result<AnchorStore> {
    let policy = PolicyTable::uniform(world, false);
    let mut anchors = tcfg.anchor_store()?;
    for _ in 0..batches {
        let q = rng.random_range(0..world.n_queries());
        let mut recs = Vec::new();
        for u in 0..world.n_users() {
            recs.extend(rollout_group(&policy, world, u, q, tcfg.group_size, rng)?.records);
        }
        anchors.update_from_records(&recs)?;
    }
    Ok(anchors)
}

/// Mean pers-track advantage error of every estimator on identical samples
/// drawn from the uniform policy.
pub fn measure_errors(world: &World, kinds: &[Estimator], tcfg: &TrainConfig, cfg: &CompareConfig, seed: u64) -> Result<BTreeMap<Estimator, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let policy = PolicyTable::uniform(world, false);
    let mut anchors = warm_anchors(world, tcfg, cfg.warmup_batches, &mut rng)?;
    let nq = world.n_queries();
    let mut errors: BTreeMap<Estimator, Vec<f64>> = BTreeMap::new();
    for _ in 0..cfg.measure_batches {
        let q = rng.random_range(0..nq);
        let groups = (0..world.n_users())
            .map(|u| rollout_group(&policy, world, u, q, tcfg.group_size, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        for &k in kinds {
            let scored = pers_scores(k, &groups, world, &policy, &anchors, tcfg)?;
            errors.entry(k).or_default().extend(scored);
        }
        let recs: Vec<_> = groups.into_iter().flat_map(|g| g.records).collect();
        anchors.update_from_records(&recs)?;
    }
    Ok(errors.into_iter().map(|(k, v)| (k, stats::mean(&v))).collect())
}

/// Absolute errors on the personalized track. GRPO pools the personalized
/// reward across users here so all estimators target the same oracle.
fn pers_scores(
    kind: Estimator,
    groups: &[super::Group],
    world: &World,
    policy: &PolicyTable,
    anchors: &AnchorStore,
    tcfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if kind != Estimator::Grpo {
        return Ok(score_groups(kind, groups, world, policy, anchors, &tcfg.advantage)?.abs_errors);
    }
    let eps = tcfg.advantage.epsilon;
    let all: Vec<_> = groups.iter().flat_map(|g| g.records.iter().cloned()).collect();
    let pooled = crate::advantage::compute_grpo_advantages(&all, eps, |r| r.reward_pers)?;
    let mut out = Vec::with_capacity(pooled.len());
    let mut it = pooled.iter();
    for g in groups {
        let (mu, sigma) = policy.pers_moments(world, g.user, g.query);
        for t in &g.pers_true {
            let a = it.next().expect("one advantage per record");
            out.push((a - (t - mu) / (sigma + eps)).abs());
        }
    }
    Ok(out)
}

fn run_trial(trial: usize, env: &EnvConfig, tcfg: &TrainConfig, cfg: &CompareConfig) -> Result<TrialResult> {
    let seed = derive_seed(env.seed, trial as u64);
    let world = World::generate(&EnvConfig { seed, ..env.clone() })?;
    let adv_error = measure_errors(&world, &cfg.optimizers, tcfg, cfg, derive_seed(seed, 1))?;
    let mut final_pers_reward = BTreeMap::new();
    let mut anchor_drift = None;
    for &k in &cfg.optimizers {
        let run_cfg = TrainConfig {
            optimizer: k,
            seed: derive_seed(seed, 2),
            ..tcfg.clone()
        };
        let mut policy = PolicyTable::uniform(&world, false);
        let mut anchors = run_cfg.anchor_store()?;
        let report = train(&world, &mut policy, &mut anchors, &run_cfg)?;
        final_pers_reward.insert(k, report.final_pers_reward);
        if k == Estimator::Parpo {
            let drift: Vec<f64> = (0..world.n_users())
                .filter_map(|u| {
                    let a = anchors.get(&world.user_id(u))?;
                    let truth = stats::mean(
                        &(0..world.n_queries())
                            .map(|q| policy.pers_moments(&world, u, q).0)
                            .collect::<Vec<_>>(),
                    );
                    Some((a.mean - truth).abs())
                })
                .collect();
            anchor_drift = (!drift.is_empty()).then(|| stats::mean(&drift));
        }
    }
    Ok(TrialResult {
        trial,
        seed,
        adv_error,
        final_pers_reward,
        anchor_drift,
    })
}

/// Runs trials in parallel; trial `i` uses a seed derived from `env.seed`
/// and `i`, so results do not depend on scheduling.
pub fn compare_optimizers(env: &EnvConfig, tcfg: &TrainConfig, cfg: &CompareConfig) -> Result<CompareReport> {
    env.validate()?;
    tcfg.validate()?;
    let mut kinds = cfg.optimizers.clone();
    kinds.sort();
    kinds.dedup();
    if kinds.len() < 2 {
        return Err(SimError::InvalidConfig("compare needs at least two distinct optimizers".into()));
    }
    let cfg = CompareConfig {
        optimizers: kinds.clone(),
        ..cfg.clone()
    };
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(t, env, tcfg, &cfg))
        .collect::<Result<Vec<_>>>()?;
    let avg = |f: &dyn Fn(&TrialResult) -> Option<f64>| -> Option<f64> {
        let v: Vec<f64> = trials.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| stats::mean(&v))
    };
    let mut mean_adv_error = BTreeMap::new();
    let mut mean_final_pers_reward = BTreeMap::new();
    for &k in &kinds {
        if let Some(m) = avg(&|t| t.adv_error.get(&k).copied()) {
            mean_adv_error.insert(k, m);
        }
        if let Some(m) = avg(&|t| t.final_pers_reward.get(&k).copied()) {
            mean_final_pers_reward.insert(k, m);
        }
    }
    let parpo_error_wins = trials
        .iter()
        .filter(|t| matches!((t.adv_error.get(&Estimator::Parpo), t.adv_error.get(&Estimator::Grpo)), (Some(p), Some(g)) if p < g))
        .count();
    let ordering_holds = trials
        .iter()
        .filter(|t| {
            let r = &t.final_pers_reward;
            matches!(
                (r.get(&Estimator::Parpo), r.get(&Estimator::NoAnchor), r.get(&Estimator::Grpo)),
                (Some(p), Some(n), Some(g)) if p >= n && n >= g
            )
        })
        .count();
    Ok(CompareReport {
        trials,
        mean_adv_error,
        mean_final_pers_reward,
        parpo_error_wins,
        ordering_holds,
    })
}

/// Personalization gap on the first two candidates of `query`: returns
/// (brute-force `V_pers - V_avg`, closed-form gap).
///
/// The brute force enumerates every deterministic per-user assignment and
/// both shared choices, so it is limited to 20 users.
pub fn personalization_consistency(world: &World, query: usize) -> Result<(f64, f64)> {
    world.check(0, query)?;
    let n = world.n_users();
    if n > 20 {
        return Err(SimError::InvalidConfig("brute force limited to 20 users".into()));
    }
    let z: Vec<f64> = (0..n).map(|u| world.preference_probability(u, query)).collect();
    let value = |mask: u32| -> f64 {
        let s: f64 = z
            .iter()
            .enumerate()
            .map(|(u, &p)| if mask >> u & 1 == 1 { p } else { 1.0 - p })
            .sum();
        s / n as f64
    };
    let all = (1u32 << n) - 1;
    let v_pers = (0..=all).map(value).fold(f64::NEG_INFINITY, f64::max);
    let v_avg = value(0).max(value(all));
    let closed = personalization_gap(&PreferencePair::new(z)?)?.delta;
    Ok((v_pers - v_avg, closed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn consistency_on_generated_worlds() {
        for seed in 0..5 {
            let w = World::generate(&EnvConfig {
                seed,
                population_size: 6,
                noise_std: 0.5,
                ..Default::default()
            })
            .unwrap();
            for q in 0..w.n_queries() {
                let (brute, closed) = personalization_consistency(&w, q).unwrap();
                assert!((brute - closed).abs() < 1e-12, "{brute} vs {closed}");
            }
        }
    }

    #[test]
    fn needs_two_optimizers() {
        let cfg = CompareConfig {
            optimizers: vec![Estimator::Parpo, Estimator::Parpo],
            ..Default::default()
        };
        assert!(compare_optimizers(&EnvConfig::default(), &TrainConfig::default(), &cfg).is_err());
    }

    #[test]
    fn report_is_deterministic() {
        let env = EnvConfig {
            population_size: 3,
            query_count: 2,
            ..Default::default()
        };
        let tcfg = TrainConfig {
            steps: 10,
            ..Default::default()
        };
        let cfg = CompareConfig {
            trials: 3,
            warmup_batches: 2,
            measure_batches: 2,
            ..Default::default()
        };
        let a = compare_optimizers(&env, &tcfg, &cfg).unwrap();
        assert_eq!(a, compare_optimizers(&env, &tcfg, &cfg).unwrap());
        assert_eq!(a.trials.len(), 3);
    }
}
