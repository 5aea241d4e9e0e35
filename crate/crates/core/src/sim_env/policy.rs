//! Tabular softmax policies and group rollouts.

use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};

use super::{Result, SimError, World};
use crate::advantage::TrajectoryRecord;
use crate::stats;

/// Softmax logits per (user, query), or per query when shared by all users.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    shared: bool,
    /// `[slot][query][candidate]`; one slot when shared.
    logits: Vec<Vec<Vec<f64>>>,
}

impl PolicyTable {
    pub fn uniform(world: &World, shared: bool) -> Self {
        let slots = if shared { 1 } else { world.n_users() };
        let row: Vec<Vec<f64>> = (0..world.n_queries()).map(|q| vec![0.0; world.n_candidates(q)]).collect();
        Self {
            shared,
            logits: vec![row; slots],
        }
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    fn slot(&self, user: usize) -> usize {
        if self.shared {
            0
        } else {
            user
        }
    }

    pub fn logits(&self, user: usize, query: usize) -> &[f64] {
        &self.logits[self.slot(user)][query]
    }

    pub fn logits_mut(&mut self, user: usize, query: usize) -> &mut [f64] {
        let s = self.slot(user);
        &mut self.logits[s][query]
    }

    pub fn probs(&self, user: usize, query: usize) -> Vec<f64> {
        let l = self.logits(user, query);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Expected noiseless personalized reward of `user` on `query`.
    pub fn expected_pers(&self, world: &World, user: usize, query: usize) -> f64 {
        self.probs(user, query)
            .iter()
            .zip(&world.pers[user][query])
            .map(|(p, r)| p * r)
            .sum()
    }

    /// Policy-weighted mean and std of the noiseless personalized reward.
    pub fn pers_moments(&self, world: &World, user: usize, query: usize) -> (f64, f64) {
        stats::weighted_moments(&world.pers[user][query], &self.probs(user, query))
    }

    pub fn total_moments(&self, world: &World, user: usize, query: usize) -> (f64, f64) {
        let totals: Vec<f64> = world.base[user][query]
            .iter()
            .zip(&world.pers[user][query])
            .map(|(b, p)| world.total(*b, *p))
            .collect();
        stats::weighted_moments(&totals, &self.probs(user, query))
    }
}

/// One sampled group for a (user, query) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub user: usize,
    pub query: usize,
    pub records: Vec<TrajectoryRecord>,
    pub actions: Vec<usize>,
    /// Sampling distribution the group was drawn from.
    pub probs: Vec<f64>,
    /// Noiseless personalized reward of each sample.
    pub pers_true: Vec<f64>,
}

/// Draw `size` candidates from the policy. Records carry ratio 1 since the
/// sampling and the updated policy coincide before the first gradient step.
pub fn rollout_group<R: Rng>(
    policy: &PolicyTable,
    world: &World,
    user: usize,
    query: usize,
    size: usize,
    rng: &mut R,
) -> Result<Group> {
    world.check(user, query)?;
    if size == 0 {
        return Err(SimError::InvalidConfig("group size must be positive".into()));
    }
    let probs = policy.probs(user, query);
    let dist = WeightedIndex::new(&probs).map_err(|e| SimError::InvalidConfig(format!("policy: {e}")))?;
    let user_id = world.user_id(user);
    let group_id = format!("{user_id}/{}", world.query_id(query));
    let mut records = Vec::with_capacity(size);
    let mut actions = Vec::with_capacity(size);
    let mut pers_true = Vec::with_capacity(size);
    for i in 0..size {
        let a = dist.sample(rng);
        let obs = world.observe(user, query, a, rng);
        records.push(
            TrajectoryRecord::new(format!("{group_id}/s{i}/c{a}"), user_id.clone(), group_id.clone(), obs.base, obs.pers)
                .with_ratio(1.0),
        );
        actions.push(a);
        pers_true.push(obs.pers_true);
    }
    Ok(Group {
        user,
        query,
        records,
        actions,
        probs,
        pers_true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim_env::EnvConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_normalized() {
        let w = World::generate(&EnvConfig::default()).unwrap();
        let mut p = PolicyTable::uniform(&w, false);
        p.logits_mut(1, 2).copy_from_slice(&[800.0, -3.0, 0.5, 1e-3]);
        for u in 0..w.n_users() {
            for q in 0..w.n_queries() {
                let s: f64 = p.probs(u, q).iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn shared_logits_alias() {
        let w = World::generate(&EnvConfig::default()).unwrap();
        let mut p = PolicyTable::uniform(&w, true);
        p.logits_mut(0, 0)[0] = 2.0;
        assert_eq!(p.probs(3, 0), p.probs(0, 0));
    }

    #[test]
    fn rollout_records() {
        let w = World::generate(&EnvConfig::default()).unwrap();
        let p = PolicyTable::uniform(&w, false);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = rollout_group(&p, &w, 2, 1, 6, &mut rng).unwrap();
        assert_eq!(g.records.len(), 6);
        assert!(g.records.iter().all(|r| r.ratio == Some(1.0) && r.user_id == "u2"));
        for (r, &a) in g.records.iter().zip(&g.actions) {
            assert_eq!(r.reward_base, w.base[2][1][a]);
        }
        assert!(matches!(rollout_group(&p, &w, 99, 0, 2, &mut rng), Err(SimError::UnknownUser(99))));
    }
}
