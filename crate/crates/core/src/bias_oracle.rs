//! Brute-force ground truth for advantage estimation under heterogeneous users.
//!
//! A [`UserRewardTable`] enumerates, for every `(user, query)` pair, the full set
//! of candidate trajectories with their base and personalized rewards. From it
//! the oracle computes the exact per-user value `V_u(q)`, spread `sigma_u(q)`
//! and normalized advantage, and checks the error bounds of the pooled (GRPO)
//! and anchor-calibrated estimators against those exact quantities.
//!
//! Expectations over users use the table's user weights (uniform by default);
//! trajectories within a slice are weighted uniformly.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::advantage::AnchorStore;
use crate::stats;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("index out of range: {0}")]
    InvalidIndex(String),
    #[error("invalid table: {0}")]
    InvalidTable(String),
    #[error("pooling needs at least two users, table has {0}")]
    SingleUser(usize),
    #[error("no anchor for user {0}")]
    MissingAnchor(String),
    #[error("grouping covers {got} users, table has {expected}")]
    GroupingCoverage { expected: usize, got: usize },
    #[error("preference probability {0} outside [0, 1]")]
    InvalidPreference(f64),
    #[error("identity violated: {0}")]
    IdentityViolated(String),
    #[error("reward table line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, OracleError>;

/// Which reward an oracle quantity is computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Track {
    /// `alpha * R_base + (1 - alpha) * R_pers`.
    Total,
    /// `R_pers` only.
    Pers,
}

/// All candidate trajectories of one `(user, query)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub trajectory_ids: Vec<String>,
    pub base: Vec<f64>,
    pub pers: Vec<f64>,
}

/// Exhaustive per-user, per-query, per-trajectory reward enumeration.
#[derive(Debug, Clone, PartialEq)]
pub struct UserRewardTable {
    users: Vec<String>,
    queries: Vec<String>,
    /// Indexed `[user][query]`.
    slices: Vec<Vec<Slice>>,
    alpha: f64,
    user_weights: Vec<f64>,
}

/// Exact first and second moments of one slice or of a pooled query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
}

/// Tolerance for comparing a computed left-hand side against a bound.
fn within(lhs: f64, rhs: f64, scale: f64) -> bool {
    lhs <= rhs + 1e-12 * (1.0 + scale.abs())
}

impl UserRewardTable {
    pub fn new(users: Vec<String>, queries: Vec<String>, slices: Vec<Vec<Slice>>, alpha: f64) -> Result<Self> {
        let bad = |m: String| Err(OracleError::InvalidTable(m));
        if users.is_empty() || queries.is_empty() {
            return bad("table needs at least one user and one query".into());
        }
        if !(0.0..=1.0).contains(&alpha) {
            return bad(format!("alpha must lie in [0, 1], got {alpha}"));
        }
        if slices.len() != users.len() {
            return bad(format!("{} user rows for {} users", slices.len(), users.len()));
        }
        for (u, row) in slices.iter().enumerate() {
            if row.len() != queries.len() {
                return bad(format!("user {} has {} query slices", users[u], row.len()));
            }
            for (q, s) in row.iter().enumerate() {
                let n = s.trajectory_ids.len();
                if n == 0 || s.base.len() != n || s.pers.len() != n {
                    return bad(format!("slice ({}, {}) is empty or ragged", users[u], queries[q]));
                }
                if s.base.iter().chain(&s.pers).any(|v| !v.is_finite()) {
                    return bad(format!("slice ({}, {}) has non-finite rewards", users[u], queries[q]));
                }
            }
        }
        let w = 1.0 / users.len() as f64;
        Ok(Self {
            user_weights: vec![w; users.len()],
            users,
            queries,
            slices,
            alpha,
        })
    }

    /// Build from dense `[user][query][trajectory]` arrays with generated ids.
    pub fn from_dense(base: Vec<Vec<Vec<f64>>>, pers: Vec<Vec<Vec<f64>>>, alpha: f64) -> Result<Self> {
        let n_users = pers.len();
        let n_queries = pers.first().map_or(0, |r| r.len());
        if base.len() != n_users {
            return Err(OracleError::InvalidTable("base/pers user count differs".into()));
        }
        let users = (0..n_users).map(|u| format!("u{u}")).collect();
        let queries = (0..n_queries).map(|q| format!("q{q}")).collect();
        let mut slices = Vec::with_capacity(n_users);
        for (brow, prow) in base.into_iter().zip(pers) {
            if brow.len() != prow.len() {
                return Err(OracleError::InvalidTable("base/pers query count differs".into()));
            }
            slices.push(
                brow.into_iter()
                    .zip(prow)
                    .map(|(b, p)| Slice {
                        trajectory_ids: (0..p.len()).map(|t| format!("t{t}")).collect(),
                        base: b,
                        pers: p,
                    })
                    .collect(),
            );
        }
        Self::new(users, queries, slices, alpha)
    }

    /// Replace the uniform user weighting. Weights are normalized to sum to 1.
    pub fn with_user_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.len() != self.users.len() || weights.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) {
            return Err(OracleError::InvalidTable("user weights must be non-negative, one per user".into()));
        }
        self.user_weights = weights.iter().map(|w| w / total).collect();
        Ok(self)
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn queries(&self) -> &[String] {
        &self.queries
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn user_weights(&self) -> &[f64] {
        &self.user_weights
    }

    pub fn user_index(&self, user_id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == user_id)
    }

    pub fn slice(&self, user: usize, query: usize) -> Result<&Slice> {
        self.slices
            .get(user)
            .and_then(|row| row.get(query))
            .ok_or_else(|| OracleError::InvalidIndex(format!("(user {user}, query {query})")))
    }

    /// Rewards of one slice on the requested track.
    pub fn rewards(&self, user: usize, query: usize, track: Track) -> Result<Vec<f64>> {
        let s = self.slice(user, query)?;
        Ok(match track {
            Track::Pers => s.pers.clone(),
            Track::Total => s
                .base
                .iter()
                .zip(&s.pers)
                .map(|(b, p)| self.alpha * b + (1.0 - self.alpha) * p)
                .collect(),
        })
    }

    fn reward_at(&self, user: usize, query: usize, traj: usize, track: Track) -> Result<f64> {
        let s = self.slice(user, query)?;
        if traj >= s.pers.len() {
            return Err(OracleError::InvalidIndex(format!(
                "trajectory {traj} of ({user}, {query})"
            )));
        }
        Ok(match track {
            Track::Pers => s.pers[traj],
            Track::Total => self.alpha * s.base[traj] + (1.0 - self.alpha) * s.pers[traj],
        })
    }

    /// Exact `V_u(q)` (or `mu_u(q)`) and `sigma_u(q)` with population std.
    pub fn slice_moments(&self, user: usize, query: usize, track: Track) -> Result<Moments> {
        let r = self.rewards(user, query, track)?;
        Ok(Moments {
            mean: stats::mean(&r),
            std: stats::std_dev(&r),
        })
    }

    /// Moments of the reward pooled over users (by user weight) and trajectories.
    pub fn pooled_moments(&self, query: usize, track: Track) -> Result<Moments> {
        let mut mean = 0.0;
        let mut per_user = Vec::with_capacity(self.users.len());
        for u in 0..self.users.len() {
            let r = self.rewards(u, query, track)?;
            mean += self.user_weights[u] * stats::mean(&r);
            per_user.push(r);
        }
        let var: f64 = per_user
            .iter()
            .zip(&self.user_weights)
            .map(|(r, w)| w * r.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r.len() as f64)
            .sum();
        Ok(Moments { mean, std: var.sqrt() })
    }

    /// Columnar text: `#reward-table alpha=<a>` then a tab-separated header
    /// `user_id query_id trajectory_id reward_base reward_pers` and one row per
    /// trajectory. Floats round-trip exactly.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "#reward-table alpha={}", self.alpha)?;
        let mut out = csv::WriterBuilder::new().delimiter(b'\t').from_writer(w);
        let csv_err = |e: csv::Error| OracleError::Io(std::io::Error::other(e));
        out.write_record(["user_id", "query_id", "trajectory_id", "reward_base", "reward_pers"])
            .map_err(csv_err)?;
        for (u, row) in self.slices.iter().enumerate() {
            for (q, s) in row.iter().enumerate() {
                for t in 0..s.pers.len() {
                    out.write_record([
                        self.users[u].as_str(),
                        self.queries[q].as_str(),
                        s.trajectory_ids[t].as_str(),
                        &s.base[t].to_string(),
                        &s.pers[t].to_string(),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut text = String::new();
        let mut r = r;
        r.read_to_string(&mut text)?;
        let parse_err = |line: usize, msg: String| OracleError::Parse { line, msg };
        let (first, body) = text.split_once('\n').unwrap_or((text.as_str(), ""));
        let alpha = first
            .trim_end()
            .strip_prefix("#reward-table alpha=")
            .and_then(|a| a.parse::<f64>().ok())
            .ok_or_else(|| parse_err(1, "expected '#reward-table alpha=<value>'".into()))?;
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .has_headers(true)
            .from_reader(body.as_bytes());
        let headers = rdr.headers().map_err(|e| parse_err(2, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>()
            != ["user_id", "query_id", "trajectory_id", "reward_base", "reward_pers"]
        {
            return Err(parse_err(2, "unexpected column header".into()));
        }
        let mut users: Vec<String> = Vec::new();
        let mut queries: Vec<String> = Vec::new();
        let mut user_idx: HashMap<String, usize> = HashMap::new();
        let mut query_idx: HashMap<String, usize> = HashMap::new();
        let mut cells: HashMap<(usize, usize), Slice> = HashMap::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 3;
            let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
            if rec.len() != 5 {
                return Err(parse_err(line, format!("expected 5 columns, got {}", rec.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(line, format!("bad number {s:?}: {e}")));
            let u = *user_idx.entry(rec[0].to_string()).or_insert_with(|| {
                users.push(rec[0].to_string());
                users.len() - 1
            });
            let q = *query_idx.entry(rec[1].to_string()).or_insert_with(|| {
                queries.push(rec[1].to_string());
                queries.len() - 1
            });
            let cell = cells.entry((u, q)).or_insert_with(|| Slice {
                trajectory_ids: Vec::new(),
                base: Vec::new(),
                pers: Vec::new(),
            });
            cell.trajectory_ids.push(rec[2].to_string());
            cell.base.push(num(&rec[3])?);
            cell.pers.push(num(&rec[4])?);
        }
        let mut slices = Vec::with_capacity(users.len());
        for (u, user) in users.iter().enumerate() {
            let mut row = Vec::with_capacity(queries.len());
            for (q, query) in queries.iter().enumerate() {
                let s = cells.remove(&(u, q)).ok_or_else(|| {
                    OracleError::InvalidTable(format!("missing slice ({user}, {query})"))
                })?;
                row.push(s);
            }
            slices.push(row);
        }
        Self::new(users, queries, slices, alpha)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

/// `(R(tau, u, q) - V_u(q)) / (sigma_u(q) + eps)` on the total reward.
pub fn true_user_advantage(table: &UserRewardTable, user: usize, query: usize, traj: usize, epsilon: f64) -> Result<f64> {
    true_advantage(table, user, query, traj, epsilon, Track::Total)
}

/// Same as [`true_user_advantage`] on the personalized reward alone.
pub fn true_pers_advantage(table: &UserRewardTable, user: usize, query: usize, traj: usize, epsilon: f64) -> Result<f64> {
    true_advantage(table, user, query, traj, epsilon, Track::Pers)
}

fn true_advantage(
    table: &UserRewardTable,
    user: usize,
    query: usize,
    traj: usize,
    epsilon: f64,
    track: Track,
) -> Result<f64> {
    let x = table.reward_at(user, query, traj, track)?;
    let m = table.slice_moments(user, query, track)?;
    Ok((x - m.mean) / (m.std + epsilon))
}

/// Smallest realized spread on a query: min over per-user and pooled stds.
pub fn sigma_min(table: &UserRewardTable, query: usize, track: Track) -> Result<f64> {
    let mut s = table.pooled_moments(query, track)?.std;
    for u in 0..table.users.len() {
        s = s.min(table.slice_moments(u, query, track)?.std);
    }
    Ok(s)
}

/// Decomposition of the pooled-baseline estimation error for one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrpoBiasTerms {
    /// `|V_u - V_pool| / (sigma_min + eps)`.
    pub baseline_term: f64,
    /// `|R - V_u| * |sigma_u - sigma_pool| / (sigma_min + eps)^2`.
    pub scale_term: f64,
    /// Exact `|A_grpo - A*_u|`.
    pub total_error: f64,
    pub holds: bool,
}

pub fn grpo_bias_terms(table: &UserRewardTable, user: usize, query: usize, traj: usize, epsilon: f64) -> Result<GrpoBiasTerms> {
    if table.users.len() < 2 {
        return Err(OracleError::SingleUser(table.users.len()));
    }
    let x = table.reward_at(user, query, traj, Track::Total)?;
    let own = table.slice_moments(user, query, Track::Total)?;
    let pool = table.pooled_moments(query, Track::Total)?;
    let smin = sigma_min(table, query, Track::Total)? + epsilon;
    let grpo = (x - pool.mean) / (pool.std + epsilon);
    let truth = (x - own.mean) / (own.std + epsilon);
    let total_error = (grpo - truth).abs();
    let baseline_term = (own.mean - pool.mean).abs() / smin;
    let scale_term = (x - own.mean).abs() * (own.std - pool.std).abs() / (smin * smin);
    Ok(GrpoBiasTerms {
        baseline_term,
        scale_term,
        total_error,
        holds: within(total_error, baseline_term + scale_term, grpo.abs() + truth.abs()),
    })
}

/// Per-user margins `eps_u`; `None` means `gamma_p * sqrt(v_u)` from each anchor.
fn resolve_margins(table: &UserRewardTable, anchors: &AnchorStore, margins: Option<&[f64]>) -> Result<Vec<(f64, f64)>> {
    if let Some(m) = margins {
        if m.len() != table.users.len() {
            return Err(OracleError::InvalidTable(format!(
                "{} margins for {} users",
                m.len(),
                table.users.len()
            )));
        }
    }
    table
        .users
        .iter()
        .enumerate()
        .map(|(u, id)| {
            let a = anchors
                .get(id)
                .filter(|a| a.count > 0)
                .ok_or_else(|| OracleError::MissingAnchor(id.clone()))?;
            let margin = margins.map_or(anchors.margin_coeff() * a.std_dev(), |m| m[u]);
            Ok((a.mean, margin))
        })
        .collect()
}

/// Per-query expectation-form comparison.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpectationCheck {
    pub query: String,
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnchorBoundReport {
    pub cases: usize,
    pub violations: usize,
    /// Smallest `rhs - lhs` over all trajectories; negative means a violation.
    pub min_slack: f64,
    pub max_slack: f64,
    /// Largest deviation of the observed error from `|mu_u - b_u + eps_u| / (sigma_u + eps)`.
    pub max_identity_deviation: f64,
    pub expectation: Vec<ExpectationCheck>,
}

impl AnchorBoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.expectation.iter().all(|e| e.holds)
    }
}

/// Check the anchor-only bound on every trajectory of the table, using the
/// anchor mean as `b_u` and `delta_u = |b_u - mu_u(q)|`.
pub fn anchor_bound_check(
    table: &UserRewardTable,
    anchors: &AnchorStore,
    margins: Option<&[f64]>,
    epsilon: f64,
) -> Result<AnchorBoundReport> {
    let resolved = resolve_margins(table, anchors, margins)?;
    let mut report = AnchorBoundReport {
        cases: 0,
        violations: 0,
        min_slack: f64::INFINITY,
        max_slack: f64::NEG_INFINITY,
        max_identity_deviation: 0.0,
        expectation: Vec::with_capacity(table.queries.len()),
    };
    for q in 0..table.queries.len() {
        let smin = sigma_min(table, q, Track::Pers)?;
        let (mut e_err, mut e_delta, mut e_margin) = (0.0, 0.0, 0.0);
        for (u, &(b, margin)) in resolved.iter().enumerate() {
            let m = table.slice_moments(u, q, Track::Pers)?;
            let denom = m.std + epsilon;
            let delta = (b - m.mean).abs();
            let rhs = (delta + margin) / denom;
            let exact = (m.mean - b + margin).abs() / denom;
            let s = table.slice(u, q)?;
            let mut user_err = 0.0;
            for &x in &s.pers {
                let est = (x - (b - margin)) / denom;
                let truth = (x - m.mean) / denom;
                let lhs = (est - truth).abs();
                user_err += lhs;
                report.cases += 1;
                if !within(lhs, rhs, est.abs() + truth.abs()) {
                    report.violations += 1;
                }
                report.min_slack = report.min_slack.min(rhs - lhs);
                report.max_slack = report.max_slack.max(rhs - lhs);
                report.max_identity_deviation = report.max_identity_deviation.max((lhs - exact).abs());
            }
            let w = table.user_weights[u];
            e_err += w * user_err / s.pers.len() as f64;
            e_delta += w * delta;
            e_margin += w * margin;
        }
        let rhs = (e_delta + e_margin) / (smin + epsilon);
        report.expectation.push(ExpectationCheck {
            query: table.queries[q].clone(),
            lhs: e_err,
            rhs,
            holds: within(e_err, rhs, rhs),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeterogeneityReport {
    /// `E_u (mu_u - mu_pool)^2`.
    pub h_global: f64,
    /// `E_u (mu_u - mu_G(u))^2`.
    pub h_local: f64,
    /// `h_local / h_global`, reported as 1 when `h_global` is zero.
    pub contraction: f64,
    /// `mean(delta_u) + mean(eps_u)` when anchors are supplied, else 0.
    pub residual: f64,
}

fn check_grouping(table: &UserRewardTable, grouping: &[usize]) -> Result<()> {
    if grouping.len() != table.users.len() {
        return Err(OracleError::GroupingCoverage {
            expected: table.users.len(),
            got: grouping.len(),
        });
    }
    Ok(())
}

/// Per-user means `mu_u(q)` and their group means `mu_G(u)(q)`.
fn group_means(table: &UserRewardTable, grouping: &[usize], query: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mus = (0..table.users.len())
        .map(|u| table.slice_moments(u, query, Track::Pers).map(|m| m.mean))
        .collect::<Result<Vec<_>>>()?;
    let mut sums: HashMap<usize, (f64, f64)> = HashMap::new();
    for (u, &g) in grouping.iter().enumerate() {
        let e = sums.entry(g).or_insert((0.0, 0.0));
        e.0 += table.user_weights[u] * mus[u];
        e.1 += table.user_weights[u];
    }
    let mu_g = grouping
        .iter()
        .enumerate()
        .map(|(u, g)| {
            let (s, w) = sums[g];
            // A zero-weight group has no mass; fall back to the user's own mean.
            if w > 0.0 {
                s / w
            } else {
                mus[u]
            }
        })
        .collect();
    Ok((mus, mu_g))
}

/// Global and within-group heterogeneity of per-user mean personalized reward
/// on one query. `grouping[u]` is the group label of user `u`.
pub fn heterogeneity(
    table: &UserRewardTable,
    grouping: &[usize],
    query: usize,
    anchors: Option<(&AnchorStore, Option<&[f64]>)>,
) -> Result<HeterogeneityReport> {
    check_grouping(table, grouping)?;
    let (mus, mu_g) = group_means(table, grouping, query)?;
    let w = &table.user_weights;
    let pool: f64 = mus.iter().zip(w).map(|(m, w)| m * w).sum();
    let h_global: f64 = mus.iter().zip(w).map(|(m, w)| w * (m - pool) * (m - pool)).sum();
    let h_local: f64 = mus
        .iter()
        .zip(&mu_g)
        .zip(w)
        .map(|((m, g), w)| w * (m - g) * (m - g))
        .sum();
    let zero_tol = 1e-24 * (1.0 + pool * pool);
    let contraction = if h_global <= zero_tol { 1.0 } else { h_local / h_global };
    let residual = match anchors {
        None => 0.0,
        Some((store, margins)) => {
            let resolved = resolve_margins(table, store, margins)?;
            resolved
                .iter()
                .zip(&mus)
                .zip(w)
                .map(|(((b, margin), mu), w)| w * ((b - mu).abs() + margin))
                .sum()
        }
    };
    Ok(HeterogeneityReport {
        h_global,
        h_local,
        contraction,
        residual,
    })
}

/// Probabilities `z_u` that user `u` prefers the first of two trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    z: Vec<f64>,
}

impl PreferencePair {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some(bad) = z.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(OracleError::InvalidPreference(*bad));
        }
        if z.is_empty() {
            return Err(OracleError::InvalidTable("preference vector is empty".into()));
        }
        Ok(Self { z })
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PersonalizationGap {
    /// Best value when every user may get a different trajectory.
    pub v_pers: f64,
    /// Best value when all users must get the same trajectory.
    pub v_avg: f64,
    /// `E|z - 1/2| - |E z - 1/2|`.
    pub delta: f64,
}

pub fn personalization_gap(pref: &PreferencePair) -> Result<PersonalizationGap> {
    let z = &pref.z;
    let mean_z = stats::mean(z);
    let v_avg = mean_z.max(1.0 - mean_z);
    let v_pers = stats::mean(&z.iter().map(|&p| p.max(1.0 - p)).collect::<Vec<_>>());
    let mean_dev = stats::mean(&z.iter().map(|p| (p - 0.5).abs()).collect::<Vec<_>>());
    let delta = mean_dev - (mean_z - 0.5).abs();
    if delta < -1e-12 {
        return Err(OracleError::IdentityViolated(format!("negative gap {delta}")));
    }
    if (delta - (v_pers - v_avg)).abs() > 1e-12 {
        return Err(OracleError::IdentityViolated(format!(
            "gap {delta} differs from v_pers - v_avg = {}",
            v_pers - v_avg
        )));
    }
    Ok(PersonalizationGap { v_pers, v_avg, delta })
}

/// Per-query result of the group-augmented bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupBoundQuery {
    pub query: String,
    pub heterogeneity: HeterogeneityReport,
    pub sigma_min: f64,
    /// Mean over users of the exact estimation error.
    pub mean_error: f64,
    /// `(sqrt(H_G) + mean delta + mean eps) / (sigma_min + eps)`.
    pub expectation_bound: f64,
    pub expectation_holds: bool,
    /// `(sqrt(rho H) + eta) / (sigma_min + eps)`.
    pub parpo_dominant_bound: f64,
    /// `sqrt(H) / (sigma_min + eps)`.
    pub grpo_dominant_bound: f64,
    /// `rho < 1` and `eta <= (1 - sqrt(rho)) sqrt(H)`.
    pub ordering_premise: bool,
    /// When the premise holds, the PARPO bound does not exceed the GRPO one.
    pub ordering_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupBoundReport {
    pub cases: usize,
    pub violations: usize,
    pub min_slack: f64,
    pub queries: Vec<GroupBoundQuery>,
}

impl GroupBoundReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.queries.iter().all(|q| q.expectation_holds && q.ordering_holds)
    }
}

/// Bound for the group-augmented baseline `max(mu_G(u), b_u - eps_u)`.
pub fn group_bound_check(
    table: &UserRewardTable,
    grouping: &[usize],
    anchors: &AnchorStore,
    margins: Option<&[f64]>,
    epsilon: f64,
) -> Result<GroupBoundReport> {
    check_grouping(table, grouping)?;
    let resolved = resolve_margins(table, anchors, margins)?;
    let mut report = GroupBoundReport {
        cases: 0,
        violations: 0,
        min_slack: f64::INFINITY,
        queries: Vec::with_capacity(table.queries.len()),
    };
    for q in 0..table.queries.len() {
        let (mus, mu_g) = group_means(table, grouping, q)?;
        let het = heterogeneity(table, grouping, q, Some((anchors, margins)))?;
        let smin = sigma_min(table, q, Track::Pers)?;
        let mut mean_error = 0.0;
        for (u, &(b, margin)) in resolved.iter().enumerate() {
            let m = table.slice_moments(u, q, Track::Pers)?;
            let denom = m.std + epsilon;
            let tilde = mu_g[u].max(b - margin);
            let rhs = ((mu_g[u] - mus[u]).abs() + (b - mus[u]).abs() + margin) / denom;
            let s = table.slice(u, q)?;
            let mut user_err = 0.0;
            for &x in &s.pers {
                let est = (x - tilde) / denom;
                let truth = (x - m.mean) / denom;
                let lhs = (est - truth).abs();
                user_err += lhs;
                report.cases += 1;
                if !within(lhs, rhs, est.abs() + truth.abs()) {
                    report.violations += 1;
                }
                report.min_slack = report.min_slack.min(rhs - lhs);
            }
            mean_error += table.user_weights[u] * user_err / s.pers.len() as f64;
        }
        let denom = smin + epsilon;
        let expectation_bound = (het.h_local.sqrt() + het.residual) / denom;
        let parpo_dominant_bound = ((het.contraction * het.h_global).sqrt() + het.residual) / denom;
        let grpo_dominant_bound = het.h_global.sqrt() / denom;
        let ordering_premise =
            het.contraction < 1.0 && het.residual <= (1.0 - het.contraction.sqrt()) * het.h_global.sqrt();
        let ordering_holds =
            !ordering_premise || within(parpo_dominant_bound, grpo_dominant_bound, grpo_dominant_bound);
        report.queries.push(GroupBoundQuery {
            query: table.queries[q].clone(),
            heterogeneity: het,
            sigma_min: smin,
            mean_error,
            expectation_bound,
            expectation_holds: within(mean_error, expectation_bound, expectation_bound),
            parpo_dominant_bound,
            grpo_dominant_bound,
            ordering_premise,
            ordering_holds,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::UserAnchor;
    use approx::assert_abs_diff_eq;

    /// One query, pers rewards given per user; base rewards zero, alpha 0 so total = pers.
    fn table(pers: &[&[f64]]) -> UserRewardTable {
        let p: Vec<Vec<Vec<f64>>> = pers.iter().map(|r| vec![r.to_vec()]).collect();
        let b: Vec<Vec<Vec<f64>>> = pers.iter().map(|r| vec![vec![0.0; r.len()]]).collect();
        UserRewardTable::from_dense(b, p, 0.0).unwrap()
    }

    #[test]
    fn true_advantage_cases() {
        let t = table(&[&[3.0, 3.0, 3.0]]);
        for i in 0..3 {
            assert_eq!(true_user_advantage(&t, 0, 0, i, 1e-8).unwrap(), 0.0);
        }
        let t = table(&[&[0.0, 2.0]]);
        assert_eq!(true_user_advantage(&t, 0, 0, 0, 0.0).unwrap(), -1.0);
        assert_eq!(true_user_advantage(&t, 0, 0, 1, 0.0).unwrap(), 1.0);
        let t = table(&[&[4.0]]);
        assert_eq!(true_user_advantage(&t, 0, 0, 0, 1e-8).unwrap(), 0.0);
        assert!(matches!(true_user_advantage(&t, 0, 0, 5, 1e-8), Err(OracleError::InvalidIndex(_))));
        assert!(matches!(true_user_advantage(&t, 3, 0, 0, 1e-8), Err(OracleError::InvalidIndex(_))));
    }

    #[test]
    fn grpo_terms_identical_users() {
        let t = table(&[&[1.0, 2.0], &[1.0, 2.0]]);
        let b = grpo_bias_terms(&t, 0, 0, 1, 1e-8).unwrap();
        assert_eq!((b.baseline_term, b.scale_term), (0.0, 0.0));
        assert!(b.total_error < 1e-15 && b.holds);
    }

    #[test]
    fn grpo_terms_shifted_users() {
        // Four-entry table enumerated by hand: V_0 = 1, V_1 = 11, V_pool = 6,
        // sigma_u = 1, sigma_pool = sqrt(26).
        let t = table(&[&[0.0, 2.0], &[10.0, 12.0]]);
        let pool = t.pooled_moments(0, Track::Total).unwrap();
        assert_abs_diff_eq!(pool.mean, 6.0);
        assert_abs_diff_eq!(pool.std, 26f64.sqrt(), epsilon = 1e-12);
        for u in 0..2 {
            for tr in 0..2 {
                let b = grpo_bias_terms(&t, u, 0, tr, 0.0).unwrap();
                assert_abs_diff_eq!(b.baseline_term, 5.0, epsilon = 1e-12);
                assert!(b.holds, "{b:?}");
                let x = [[0.0, 2.0], [10.0, 12.0]][u][tr];
                let expect = ((x - 6.0) / 26f64.sqrt() - (x - [1.0, 11.0][u])).abs();
                assert_abs_diff_eq!(b.total_error, expect, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn grpo_terms_equal_means_different_spread() {
        let t = table(&[&[0.0, 2.0], &[-4.0, 6.0]]);
        let b = grpo_bias_terms(&t, 1, 0, 0, 1e-8).unwrap();
        assert!(b.baseline_term < 1e-12);
        assert!(b.scale_term > 0.0);
        assert!(b.holds);
        assert!(matches!(grpo_bias_terms(&table(&[&[1.0]]), 0, 0, 0, 1e-8), Err(OracleError::SingleUser(1))));
    }

    fn store_with(anchors: &[(f64, f64)]) -> AnchorStore {
        let mut s = AnchorStore::new(0.9, 0.0).unwrap();
        for (u, &(mean, variance)) in anchors.iter().enumerate() {
            s.insert(format!("u{u}"), UserAnchor { mean, variance, count: 1 });
        }
        s
    }

    #[test]
    fn anchor_bound_zero_delta() {
        let t = table(&[&[0.0, 2.0]]);
        let r = anchor_bound_check(&t, &store_with(&[(1.0, 1.0)]), Some(&[0.0]), 1e-8).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.max_identity_deviation < 1e-15);
        assert!(r.max_slack.abs() < 1e-15);
    }

    #[test]
    fn anchor_bound_tight_case() {
        // mu = 1, sigma = 1; anchor mean 0.5 (delta 0.5), margin 0.1 -> error 0.6, bound 0.6.
        let t = table(&[&[0.0, 2.0]]);
        let r = anchor_bound_check(&t, &store_with(&[(0.5, 1.0)]), Some(&[0.1]), 0.0).unwrap();
        assert_eq!(r.violations, 0);
        assert!(r.min_slack.abs() < 1e-12);
        assert!(r.max_identity_deviation < 1e-12);
        // Opposite direction: anchor above the mean partially cancels the margin.
        let r = anchor_bound_check(&t, &store_with(&[(1.5, 1.0)]), Some(&[0.1]), 0.0).unwrap();
        assert_abs_diff_eq!(r.min_slack, 0.6 - 0.4, epsilon = 1e-12);
    }

    #[test]
    fn anchor_bound_missing_anchor() {
        let t = table(&[&[0.0, 2.0], &[1.0, 3.0]]);
        assert!(matches!(
            anchor_bound_check(&t, &store_with(&[(1.0, 1.0)]), None, 1e-8),
            Err(OracleError::MissingAnchor(_))
        ));
    }

    #[test]
    fn heterogeneity_cases() {
        let t = table(&[&[1.0, 3.0], &[2.0, 2.0]]);
        let h = heterogeneity(&t, &[0, 1], 0, None).unwrap();
        assert_eq!((h.h_global, h.h_local, h.contraction, h.residual), (0.0, 0.0, 1.0, 0.0));

        let t = table(&[&[0.0], &[2.0]]);
        let h = heterogeneity(&t, &[0, 1], 0, None).unwrap();
        assert_eq!((h.h_global, h.h_local), (1.0, 0.0));
        let h = heterogeneity(&t, &[0, 0], 0, None).unwrap();
        assert_eq!((h.h_global, h.h_local, h.contraction), (1.0, 1.0, 1.0));
        assert!(matches!(
            heterogeneity(&t, &[0], 0, None),
            Err(OracleError::GroupingCoverage { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn gap_cases() {
        let g = personalization_gap(&PreferencePair::new(vec![0.5, 0.5]).unwrap()).unwrap();
        assert_eq!((g.v_pers, g.v_avg, g.delta), (0.5, 0.5, 0.0));
        let g = personalization_gap(&PreferencePair::new(vec![0.9, 0.1]).unwrap()).unwrap();
        assert_abs_diff_eq!(g.v_pers, 0.9, epsilon = 1e-15);
        assert_abs_diff_eq!(g.v_avg, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(g.delta, 0.4, epsilon = 1e-15);
        let g = personalization_gap(&PreferencePair::new(vec![0.8, 0.8]).unwrap()).unwrap();
        assert_abs_diff_eq!(g.v_pers, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(g.v_avg, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(g.delta, 0.0, epsilon = 1e-15);
        assert!(matches!(PreferencePair::new(vec![1.5]), Err(OracleError::InvalidPreference(_))));
    }

    #[test]
    fn group_bound_perfect() {
        let t = table(&[&[0.0, 2.0], &[5.0, 9.0]]);
        let store = store_with(&[(1.0, 1.0), (7.0, 4.0)]);
        let r = group_bound_check(&t, &[0, 1], &store, Some(&[0.0, 0.0]), 1e-8).unwrap();
        assert!(r.passed());
        for q in &r.queries {
            assert!(q.mean_error < 1e-15);
            assert!(q.expectation_bound < 1e-15);
        }
    }

    #[test]
    fn group_bound_two_groups_of_two() {
        // mu = [0, 2, 10, 14]; groups {0,1} and {2,3}: mu_G = [1, 1, 12, 12];
        // H_G = (1 + 1 + 4 + 4) / 4 = 2.5. Anchors exact, margins zero.
        let t = table(&[&[-1.0, 1.0], &[1.0, 3.0], &[9.0, 11.0], &[13.0, 15.0]]);
        let store = store_with(&[(0.0, 1.0), (2.0, 1.0), (10.0, 1.0), (14.0, 1.0)]);
        let r = group_bound_check(&t, &[0, 0, 1, 1], &store, Some(&[0.0; 4]), 0.0).unwrap();
        let q = &r.queries[0];
        assert_abs_diff_eq!(q.heterogeneity.h_local, 2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(q.expectation_bound, 2.5f64.sqrt(), epsilon = 1e-12);
        // Baselines max(mu_G, mu_u): users 0 and 2 take the group mean -> errors 1 and 2.
        assert_abs_diff_eq!(q.mean_error, 0.75, epsilon = 1e-12);
        assert!(r.passed());
    }

    #[test]
    fn table_round_trip() {
        let t = table(&[&[0.1, 1.0 / 3.0], &[-2.0, 1e-17]]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(UserRewardTable::read_from(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn table_rejects_missing_slice() {
        let text = "#reward-table alpha=0.5\nuser_id\tquery_id\ttrajectory_id\treward_base\treward_pers\n\
                    a\tq1\tt\t0\t1\nb\tq2\tt\t0\t1\n";
        assert!(matches!(UserRewardTable::read_from(text.as_bytes()), Err(OracleError::InvalidTable(_))));
    }
}
