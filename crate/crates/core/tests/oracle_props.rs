use parpo_core::advantage::{AnchorStore, UserAnchor};
use parpo_core::bias_oracle::*;
use proptest::prelude::*;

/// One query; base rewards zero and alpha 0 so the total equals pers.
fn single_query(pers: &[Vec<f64>]) -> UserRewardTable {
    let p: Vec<Vec<Vec<f64>>> = pers.iter().map(|r| vec![r.clone()]).collect();
    let b: Vec<Vec<Vec<f64>>> = pers.iter().map(|r| vec![vec![0.0; r.len()]]).collect();
    UserRewardTable::from_dense(b, p, 0.0).unwrap()
}

fn pop_moments(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
    (m, v.sqrt())
}

fn table_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (2usize..=4, 2usize..=6).prop_flat_map(|(u, t)| prop::collection::vec(prop::collection::vec(-10.0f64..10.0, t), u))
}

#[test]
fn gap_examples() {
    let g = personalization_gap(&PreferencePair::new(vec![0.9, 0.1]).unwrap()).unwrap();
    assert!((g.v_pers - 0.9).abs() < 1e-15 && (g.v_avg - 0.5).abs() < 1e-15 && (g.delta - 0.4).abs() < 1e-15);
    let g = personalization_gap(&PreferencePair::new(vec![0.8, 0.8]).unwrap()).unwrap();
    assert_eq!((g.v_pers, g.v_avg, g.delta), (0.8, 0.8, 0.0));
}

#[test]
fn pooled_baseline_far_from_both_users() {
    let t = single_query(&[vec![0.0, 2.0], vec![10.0, 12.0]]);
    assert_eq!(t.pooled_moments(0, Track::Total).unwrap().mean, 6.0);
    for u in 0..2 {
        for i in 0..2 {
            let b = grpo_bias_terms(&t, u, 0, i, 1e-8).unwrap();
            assert!(b.holds && b.baseline_term > 4.0, "{b:?}");
        }
    }
    let t = single_query(&[vec![-1.0, 1.0], vec![-5.0, 5.0]]);
    let b = grpo_bias_terms(&t, 0, 0, 1, 1e-8).unwrap();
    assert!(b.baseline_term.abs() < 1e-12 && b.scale_term > 0.0 && b.holds);
}

#[test]
fn anchor_error_exact_example() {
    // mu = 1, sigma = 1; anchor mean 0.5 with margin 0.1 puts b - eps at 0.4.
    let t = single_query(&[vec![0.0, 2.0], vec![0.0, 2.0]]);
    let mut s = AnchorStore::new(0.9, 0.0).unwrap();
    for id in ["u0", "u1"] {
        s.insert(id, UserAnchor { mean: 0.5, variance: 1.0, count: 1 });
    }
    let r = anchor_bound_check(&t, &s, Some(&[0.1, 0.1]), 0.0).unwrap();
    assert!(r.passed());
    assert!(r.max_identity_deviation < 1e-12);
    // Bound (delta + eps) / sigma = 0.6 is attained.
    assert!(r.min_slack.abs() < 1e-12, "{r:?}");
}

#[test]
fn heterogeneity_examples() {
    let t = single_query(&[vec![-1.0, 1.0], vec![1.0, 3.0]]);
    let h = heterogeneity(&t, &[0, 1], 0, None).unwrap();
    assert!((h.h_global - 1.0).abs() < 1e-15 && h.h_local == 0.0);
    let h = heterogeneity(&t, &[0, 0], 0, None).unwrap();
    assert!((h.h_global - 1.0).abs() < 1e-15 && (h.h_local - 1.0).abs() < 1e-15 && h.contraction == 1.0);
}

#[test]
fn group_bound_hand_example() {
    // Users' means 0, 2 in group 0 and 10, 14 in group 1.
    let t = single_query(&[vec![-1.0, 1.0], vec![1.0, 3.0], vec![9.0, 11.0], vec![13.0, 15.0]]);
    let mut s = AnchorStore::new(0.9, 0.0).unwrap();
    for (id, m) in [("u0", 0.0), ("u1", 2.0), ("u2", 10.0), ("u3", 14.0)] {
        s.insert(id, UserAnchor { mean: m, variance: 1.0, count: 1 });
    }
    let r = group_bound_check(&t, &[0, 0, 1, 1], &s, Some(&[0.0; 4]), 0.0).unwrap();
    assert!(r.passed());
    let q = &r.queries[0];
    // Within-group deviations are 1, 1, 2, 2, so H_G = 2.5; sigma_min = 1.
    assert!((q.heterogeneity.h_local - 2.5).abs() < 1e-12);
    assert!((q.expectation_bound - 2.5f64.sqrt()).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn gap_is_brute_force_and_nonnegative(z in prop::collection::vec(0.0f64..=1.0, 1..12)) {
        let g = personalization_gap(&PreferencePair::new(z.clone()).unwrap()).unwrap();
        let n = z.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            let v: f64 = z.iter().enumerate().map(|(u, p)| if mask >> u & 1 == 1 { *p } else { 1.0 - p }).sum::<f64>() / n as f64;
            best = best.max(v);
        }
        let mean_z = z.iter().sum::<f64>() / n as f64;
        let shared = mean_z.max(1.0 - mean_z);
        prop_assert!((g.v_pers - best).abs() < 1e-12);
        prop_assert!((g.v_avg - shared).abs() < 1e-12);
        prop_assert!(g.delta >= -1e-12);
        prop_assert!((g.delta - (best - shared)).abs() < 1e-12);
    }

    #[test]
    fn grpo_bound_recomputed(rows in table_strategy()) {
        let t = single_query(&rows);
        let pooled: Vec<f64> = rows.iter().flatten().copied().collect();
        let (pm, ps) = pop_moments(&pooled);
        let smin = rows.iter().map(|r| pop_moments(r).1).fold(ps, f64::min);
        let eps = 1e-8;
        for (u, r) in rows.iter().enumerate() {
            let (m, s) = pop_moments(r);
            for (i, x) in r.iter().enumerate() {
                let b = grpo_bias_terms(&t, u, 0, i, eps).unwrap();
                let err = ((x - pm) / (ps + eps) - (x - m) / (s + eps)).abs();
                prop_assert!((b.total_error - err).abs() < 1e-9 * (1.0 + err));
                prop_assert!(err <= ((m - pm).abs() / (smin + eps) + (x - m).abs() * (s - ps).abs() / (smin + eps).powi(2)) * (1.0 + 1e-9) + 1e-9);
                prop_assert!(b.holds);
            }
        }
    }

    #[test]
    fn anchor_bound_never_fails(rows in table_strategy(), shift in prop::collection::vec(-5.0f64..5.0, 4), margin in prop::collection::vec(0.0f64..2.0, 4)) {
        let t = single_query(&rows);
        let mut s = AnchorStore::new(0.9, 1.0).unwrap();
        for (u, r) in rows.iter().enumerate() {
            let (m, _) = pop_moments(r);
            s.insert(format!("u{u}"), UserAnchor { mean: m + shift[u], variance: 1.0, count: 1 });
        }
        let r = anchor_bound_check(&t, &s, Some(&margin[..rows.len()]), 1e-8).unwrap();
        prop_assert!(r.passed(), "{:?}", r);
        prop_assert!(r.max_identity_deviation < 1e-10);
    }

    #[test]
    fn group_bound_never_fails(rows in table_strategy(), labels in prop::collection::vec(0usize..2, 4), shift in prop::collection::vec(-3.0f64..3.0, 4)) {
        let t = single_query(&rows);
        let mut grouping: Vec<usize> = labels[..rows.len()].to_vec();
        // Dense labels starting at 0.
        if !grouping.contains(&0) {
            grouping.iter_mut().for_each(|g| *g = 0);
        }
        let mut s = AnchorStore::new(0.9, 0.5).unwrap();
        for (u, r) in rows.iter().enumerate() {
            s.insert(format!("u{u}"), UserAnchor { mean: pop_moments(r).0 + shift[u], variance: 0.25, count: 2 });
        }
        let r = group_bound_check(&t, &grouping, &s, None, 1e-8).unwrap();
        prop_assert_eq!(r.violations, 0);
        prop_assert!(r.queries.iter().all(|q| q.expectation_holds && q.ordering_holds));
    }

    #[test]
    fn table_round_trip(rows in table_strategy(), alpha in 0.0f64..=1.0) {
        let base: Vec<Vec<Vec<f64>>> = rows.iter().map(|r| vec![r.iter().map(|x| x / 3.0).collect()]).collect();
        let pers: Vec<Vec<Vec<f64>>> = rows.iter().map(|r| vec![r.clone()]).collect();
        let t = UserRewardTable::from_dense(base, pers, alpha).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        prop_assert_eq!(UserRewardTable::read_from(buf.as_slice()).unwrap(), t);
    }
}
