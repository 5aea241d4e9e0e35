use parpo_core::advantage::Estimator;
use parpo_core::bias_oracle::{heterogeneity, personalization_gap, PreferencePair, UserRewardTable};
use parpo_core::sim_env::compare::personalization_consistency;
use parpo_core::sim_env::train::write_trace_csv;
use parpo_core::sim_env::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env() -> impl Strategy<Value = EnvConfig> {
    (any::<u64>(), 0.0f64..3.0, 0.0f64..1.0, 0.0f64..=1.0, 1usize..8, 1usize..4, 2usize..6).prop_map(
        |(seed, h, noise, alpha, users, queries, cands)| EnvConfig {
            alpha_mix: alpha,
            noise_std: noise,
            heterogeneity_level: h,
            population_size: users,
            query_count: queries,
            candidate_count: cands,
            feature_dim: 3,
            seed,
        },
    )
}

#[test]
fn heterogeneous_worlds_have_positive_spread() {
    for seed in 0..10 {
        let w = World::generate(&EnvConfig {
            heterogeneity_level: 2.0,
            population_size: 8,
            seed,
            ..Default::default()
        })
        .unwrap();
        let t = w.ground_truth().unwrap();
        let grouping: Vec<usize> = (0..8).collect();
        for q in 0..w.n_queries() {
            assert!(heterogeneity(&t, &grouping, q, None).unwrap().h_global > 0.0);
        }
    }
}

#[test]
fn one_hot_policy_repeats() {
    let w = World::generate(&EnvConfig::default()).unwrap();
    let mut p = PolicyTable::uniform(&w, false);
    p.logits_mut(0, 0)[2] = 1e6;
    let g = rollout_group(&p, &w, 0, 0, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(g.actions.iter().all(|a| *a == 2));
}

#[test]
fn uniform_sampling_is_roughly_uniform() {
    let w = World::generate(&EnvConfig::default()).unwrap();
    let p = PolicyTable::uniform(&w, false);
    let g = rollout_group(&p, &w, 0, 0, 8000, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut counts = [0usize; 4];
    for a in g.actions {
        counts[a] += 1;
    }
    let chi2: f64 = counts.iter().map(|c| (*c as f64 - 2000.0).powi(2) / 2000.0).sum();
    // 3 degrees of freedom; 16.27 is the 0.1% tail.
    assert!(chi2 < 16.27, "{counts:?}");
}

#[test]
fn shared_policy_respects_ceiling() {
    let w = World::opposed_pair(0.5);
    let z: Vec<f64> = (0..2).map(|u| w.preference_probability(u, 0)).collect();
    let gap = personalization_gap(&PreferencePair::new(z.clone()).unwrap()).unwrap();
    let value = |p: &PolicyTable| -> f64 {
        (0..2)
            .map(|u| {
                let pr = p.probs(u, 0);
                z[u] * pr[0] + (1.0 - z[u]) * pr[1]
            })
            .sum::<f64>()
            / 2.0
    };
    let mut results = Vec::new();
    for shared in [true, false] {
        let cfg = TrainConfig {
            steps: 2000,
            ..Default::default()
        };
        let mut p = PolicyTable::uniform(&w, shared);
        train(&w, &mut p, &mut cfg.anchor_store().unwrap(), &cfg).unwrap();
        results.push(value(&p));
    }
    assert!(results[0] <= gap.v_avg + 1e-12, "{} > {}", results[0], gap.v_avg);
    assert!(results[1] > gap.v_avg);
    assert!(results[1] <= gap.v_pers + 1e-12);
}

#[test]
fn exported_world_reloads() {
    let w = World::generate(&EnvConfig::default()).unwrap();
    let mut buf = Vec::new();
    w.ground_truth().unwrap().write_to(&mut buf).unwrap();
    let t = UserRewardTable::read_from(buf.as_slice()).unwrap();
    let back = World::from_table(&t, w.noise_std).unwrap();
    assert_eq!((back.base, back.pers), (w.base, w.pers));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn policy_normalized_and_totals_decompose(cfg in env(), logits in prop::collection::vec(-30.0f64..30.0, 6)) {
        let w = World::generate(&cfg).unwrap();
        let mut p = PolicyTable::uniform(&w, false);
        for (l, x) in p.logits_mut(0, 0).iter_mut().zip(&logits) {
            *l = *x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for u in 0..w.n_users() {
            for q in 0..w.n_queries() {
                prop_assert!((p.probs(u, q).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for r in rollout_group(&p, &w, u, q, 3, &mut rng).unwrap().records {
                    let expect = cfg.alpha_mix * r.reward_base + (1.0 - cfg.alpha_mix) * r.reward_pers;
                    prop_assert!((r.total_reward(w.alpha) - expect).abs() < 1e-12);
                    prop_assert!((w.total(r.reward_base, r.reward_pers) - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn brute_force_gap_matches_closed_form(cfg in env()) {
        let w = World::generate(&cfg).unwrap();
        for q in 0..w.n_queries() {
            let (brute, closed) = personalization_consistency(&w, q).unwrap();
            prop_assert!((brute - closed).abs() < 1e-12);
        }
    }

    #[test]
    fn runs_are_deterministic(cfg in env(), kind in prop::sample::select(Estimator::ALL.to_vec())) {
        let w = World::generate(&cfg).unwrap();
        prop_assert_eq!(&World::generate(&cfg).unwrap(), &w);
        let tcfg = TrainConfig { optimizer: kind, steps: 8, seed: cfg.seed, ..Default::default() };
        let run = || {
            let mut p = PolicyTable::uniform(&w, false);
            let r = train(&w, &mut p, &mut tcfg.anchor_store().unwrap(), &tcfg).unwrap();
            let mut buf = Vec::new();
            write_trace_csv(&r.trace, &mut buf).unwrap();
            (p, buf)
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn homogeneous_users_share_rewards(cfg in env()) {
        let w = World::generate(&EnvConfig { heterogeneity_level: 0.0, ..cfg }).unwrap();
        for u in 1..w.n_users() {
            prop_assert_eq!(&w.pers[u], &w.pers[0]);
        }
    }
}
