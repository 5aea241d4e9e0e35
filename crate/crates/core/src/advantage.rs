//! Dual-track group-relative advantage estimation with per-user anchors.
//!
//! Each sampled trajectory carries two rewards: a user-independent task
//! quality score (`reward_base`) and a user-conditioned preference score
//! (`reward_pers`). The base track is standardized within its prompt group.
//! The personalized track is centered on
//!
//! ```text
//! b_{u,g} = max(mean_g(R_pers), m_u - gamma_p * sqrt(v_u))
//! ```
//!
//! and scaled by the user's running spread `sqrt(v_u) + eps`, where `(m_u, v_u)`
//! are exponential moving averages kept in an [`AnchorStore`]. The fused
//! advantage `w_base * A_base + w_pers * A_pers` feeds a PPO-style clipped loss.
//!
//! Two comparators are provided for ablations: pooled GRPO over all records of a
//! query regardless of user, and a decoupled estimator without anchors.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// Floor applied to the variance on the first anchor update.
pub const MIN_ANCHOR_VARIANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum AdvantageError {
    #[error("empty group")]
    EmptyGroup,
    #[error("records from different groups ({0} and {1}) passed as one group")]
    MixedGroup(String, String),
    #[error("empty anchor batch")]
    EmptyAnchorBatch,
    #[error("uninitialized anchor")]
    UninitializedAnchor,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("missing ratio for trajectory {0}")]
    MissingRatio(String),
    #[error("non-finite value in trajectory {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("anchor store line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AdvantageError>;

/// One sampled trajectory with its decomposed rewards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub trajectory_id: String,
    pub user_id: String,
    pub group_id: String,
    pub reward_base: f64,
    pub reward_pers: f64,
    /// Trajectory-level policy ratio `pi_new / pi_old`; only needed for the loss.
    pub ratio: Option<f64>,
}

impl TrajectoryRecord {
    pub fn new(
        trajectory_id: impl Into<String>,
        user_id: impl Into<String>,
        group_id: impl Into<String>,
        reward_base: f64,
        reward_pers: f64,
    ) -> Self {
        Self {
            trajectory_id: trajectory_id.into(),
            user_id: user_id.into(),
            group_id: group_id.into(),
            reward_base,
            reward_pers,
            ratio: None,
        }
    }

    pub fn with_ratio(mut self, ratio: f64) -> Self {
        self.ratio = Some(ratio);
        self
    }

    /// `alpha * R_base + (1 - alpha) * R_pers`.
    pub fn total_reward(&self, alpha: f64) -> f64 {
        alpha * self.reward_base + (1.0 - alpha) * self.reward_pers
    }

    fn check_finite(&self) -> Result<()> {
        let ratio_ok = self.ratio.is_none_or(|r| r.is_finite() && r > 0.0);
        if self.reward_base.is_finite() && self.reward_pers.is_finite() && ratio_ok {
            Ok(())
        } else {
            Err(AdvantageError::NonFinite(self.trajectory_id.clone()))
        }
    }
}

/// Persistent per-user EMA statistics of personalized rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UserAnchor {
    pub mean: f64,
    pub variance: f64,
    pub count: u64,
}

impl UserAnchor {
    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Map of user anchors together with the EMA decay `rho` and margin `gamma_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorStore {
    anchors: BTreeMap<String, UserAnchor>,
    decay: f64,
    margin_coeff: f64,
}

impl Default for AnchorStore {
    fn default() -> Self {
        Self {
            anchors: BTreeMap::new(),
            decay: 0.99,
            margin_coeff: 1.0,
        }
    }
}

impl AnchorStore {
    pub fn new(decay: f64, margin_coeff: f64) -> Result<Self> {
        if !(decay > 0.0 && decay < 1.0) {
            return Err(AdvantageError::InvalidConfig(format!(
                "anchor decay must lie in (0, 1), got {decay}"
            )));
        }
        if !(margin_coeff >= 0.0 && margin_coeff.is_finite()) {
            return Err(AdvantageError::InvalidConfig(format!(
                "margin coefficient must be finite and >= 0, got {margin_coeff}"
            )));
        }
        Ok(Self {
            anchors: BTreeMap::new(),
            decay,
            margin_coeff,
        })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn margin_coeff(&self) -> f64 {
        self.margin_coeff
    }

    /// Returns `None` for users that have never been updated.
    pub fn get(&self, user_id: &str) -> Option<&UserAnchor> {
        self.anchors.get(user_id)
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &UserAnchor)> {
        self.anchors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Overwrite an anchor directly (used for restoring state and for
    /// adversarial checks).
    pub fn insert(&mut self, user_id: impl Into<String>, anchor: UserAnchor) {
        self.anchors.insert(user_id.into(), anchor);
    }

    /// Fold one batch of a user's personalized rewards into the anchor.
    pub fn update(&mut self, user_id: &str, batch: &[f64]) -> Result<UserAnchor> {
        if batch.is_empty() {
            return Err(AdvantageError::EmptyAnchorBatch);
        }
        if batch.iter().any(|r| !r.is_finite()) {
            return Err(AdvantageError::NonFinite(format!("anchor batch of {user_id}")));
        }
        let batch_mean = stats::mean(batch);
        let batch_var = stats::variance(batch);
        let rho = self.decay;
        let anchor = self
            .anchors
            .entry(user_id.to_string())
            .or_insert(UserAnchor {
                mean: 0.0,
                variance: 0.0,
                count: 0,
            });
        if anchor.count == 0 {
            anchor.mean = batch_mean;
            anchor.variance = batch_var.max(MIN_ANCHOR_VARIANCE);
        } else {
            anchor.mean = rho * anchor.mean + (1.0 - rho) * batch_mean;
            anchor.variance = rho * anchor.variance + (1.0 - rho) * batch_var;
        }
        anchor.count += 1;
        Ok(*anchor)
    }

    /// Update every user present in `records` once, using all of that user's
    /// personalized rewards in the batch. Users are visited in id order.
    pub fn update_from_records(&mut self, records: &[TrajectoryRecord]) -> Result<()> {
        let mut per_user: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        for r in records {
            per_user.entry(&r.user_id).or_default().push(r.reward_pers);
        }
        for (user, batch) in per_user {
            self.update(user, &batch)?;
        }
        Ok(())
    }

    /// Line-delimited record format: a metadata line, a column header, then one
    /// tab-separated `user_id mean variance count` line per user. Floats use the
    /// shortest representation that parses back to the same bits.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "#anchor-store decay={} margin_coeff={}",
            self.decay, self.margin_coeff
        )?;
        writeln!(w, "user_id\tmean\tvariance\tcount")?;
        for (user, a) in &self.anchors {
            if user.contains(['\t', '\n']) {
                return Err(AdvantageError::InvalidConfig(format!(
                    "user id {user:?} contains a tab or newline"
                )));
            }
            writeln!(w, "{user}\t{}\t{}\t{}", a.mean, a.variance, a.count)?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let parse_err = |line: usize, msg: String| AdvantageError::Parse { line: line + 1, msg };
        let (i, meta) = lines
            .next()
            .ok_or_else(|| parse_err(0, "missing metadata line".into()))?;
        let meta = meta?;
        let rest = meta
            .strip_prefix("#anchor-store ")
            .ok_or_else(|| parse_err(i, "expected '#anchor-store' header".into()))?;
        let mut decay = None;
        let mut margin = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=') {
                Some(("decay", v)) => decay = v.parse::<f64>().ok(),
                Some(("margin_coeff", v)) => margin = v.parse::<f64>().ok(),
                _ => return Err(parse_err(i, format!("unknown metadata field {kv:?}"))),
            }
        }
        let (Some(decay), Some(margin)) = (decay, margin) else {
            return Err(parse_err(i, "metadata needs decay and margin_coeff".into()));
        };
        let mut store = AnchorStore::new(decay, margin)?;
        match lines.next() {
            Some((_, Ok(h))) if h == "user_id\tmean\tvariance\tcount" => {}
            Some((i, _)) => return Err(parse_err(i, "bad column header".into())),
            None => return Err(parse_err(1, "missing column header".into())),
        }
        for (i, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(parse_err(i, format!("expected 4 columns, got {}", cols.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| parse_err(i, format!("bad number {s:?}: {e}")))
            };
            let anchor = UserAnchor {
                mean: num(cols[1])?,
                variance: num(cols[2])?,
                count: cols[3]
                    .parse()
                    .map_err(|e| parse_err(i, format!("bad count {:?}: {e}", cols[3])))?,
            };
            if !(anchor.mean.is_finite() && anchor.variance.is_finite() && anchor.variance >= 0.0) {
                return Err(parse_err(i, "anchor values must be finite, variance >= 0".into()));
            }
            if store.anchors.insert(cols[0].to_string(), anchor).is_some() {
                return Err(parse_err(i, format!("duplicate user {:?}", cols[0])));
            }
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

/// Weights and constants of the dual-track estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdvantageConfig {
    pub w_base: f64,
    pub w_pers: f64,
    pub epsilon: f64,
    /// PPO clipping coefficient.
    pub clip: f64,
}

impl Default for AdvantageConfig {
    fn default() -> Self {
        Self {
            w_base: 0.5,
            w_pers: 0.5,
            epsilon: 1e-8,
            clip: 0.2,
        }
    }
}

impl AdvantageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AdvantageError::InvalidConfig(m));
        if !(self.w_base >= 0.0 && self.w_pers >= 0.0) {
            return bad(format!(
                "weights must be >= 0 (w_base={}, w_pers={})",
                self.w_base, self.w_pers
            ));
        }
        if self.w_base + self.w_pers <= 0.0 {
            return bad("w_base + w_pers must be > 0".into());
        }
        // epsilon = 0 is accepted for exact-arithmetic checks; negative is not.
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        Ok(())
    }
}

/// Which advantage estimator a training run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// Dual-track with user anchors.
    Parpo,
    /// Pooled single-track normalization across all users of a query.
    Grpo,
    /// Dual-track without anchors (personalized track standardized in-group).
    NoAnchor,
}

impl Estimator {
    pub const ALL: [Estimator; 3] = [Estimator::Parpo, Estimator::Grpo, Estimator::NoAnchor];

    pub fn as_str(&self) -> &'static str {
        match self {
            Estimator::Parpo => "parpo",
            Estimator::Grpo => "grpo",
            Estimator::NoAnchor => "noanchor",
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "parpo" => Ok(Estimator::Parpo),
            "grpo" => Ok(Estimator::Grpo),
            "noanchor" => Ok(Estimator::NoAnchor),
            other => Err(format!(
                "unknown optimizer {other:?}; valid options: parpo, grpo, noanchor"
            )),
        }
    }
}

fn check_group(group: &[TrajectoryRecord]) -> Result<()> {
    let first = group.first().ok_or(AdvantageError::EmptyGroup)?;
    for r in group {
        r.check_finite()?;
        if r.group_id != first.group_id {
            return Err(AdvantageError::MixedGroup(
                first.group_id.clone(),
                r.group_id.clone(),
            ));
        }
    }
    Ok(())
}

/// Within-group standardization of the base reward.
pub fn compute_base_advantages(group: &[TrajectoryRecord], cfg: &AdvantageConfig) -> Result<Vec<f64>> {
    check_group(group)?;
    let rewards: Vec<f64> = group.iter().map(|r| r.reward_base).collect();
    Ok(stats::standardize(&rewards, cfg.epsilon))
}

/// `max(group_pers_mean, m_u - gamma_p * sqrt(v_u))`.
pub fn compute_user_baseline(group_pers_mean: f64, anchor: &UserAnchor, margin_coeff: f64) -> Result<f64> {
    if anchor.count == 0 {
        return Err(AdvantageError::UninitializedAnchor);
    }
    Ok(group_pers_mean.max(anchor_floor(anchor, margin_coeff)))
}

fn anchor_floor(anchor: &UserAnchor, margin_coeff: f64) -> f64 {
    anchor.mean - margin_coeff * anchor.std_dev()
}

/// Which side of the personalized baseline was used for a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BaselineBranch {
    /// The within-group mean won the max (or tied).
    GroupMean,
    /// The anchor term `m_u - gamma_p sqrt(v_u)` strictly exceeded the group mean.
    Anchor,
    /// The user had no anchor yet; group mean and group std were used.
    Fallback,
}

/// Per-record decomposition of the personalized advantage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PersTerm {
    pub advantage: f64,
    pub baseline: f64,
    /// Denominator including epsilon.
    pub scale: f64,
    pub branch: BaselineBranch,
}

/// Personalized-track advantages together with the baseline and branch used.
///
/// A user without an anchor falls back to the group mean and the within-group
/// standard deviation for this batch.
pub fn pers_advantage_terms(
    group: &[TrajectoryRecord],
    store: &AnchorStore,
    cfg: &AdvantageConfig,
) -> Result<Vec<PersTerm>> {
    check_group(group)?;
    let pers: Vec<f64> = group.iter().map(|r| r.reward_pers).collect();
    let group_mean = stats::mean(&pers);
    let group_std = stats::std_dev(&pers);
    group
        .iter()
        .map(|r| {
            let term = match store.get(&r.user_id).filter(|a| a.count > 0) {
                Some(anchor) => {
                    let floor = anchor_floor(anchor, store.margin_coeff);
                    let baseline = compute_user_baseline(group_mean, anchor, store.margin_coeff)?;
                    let scale = anchor.std_dev() + cfg.epsilon;
                    let branch = if floor > group_mean {
                        BaselineBranch::Anchor
                    } else {
                        BaselineBranch::GroupMean
                    };
                    PersTerm {
                        advantage: (r.reward_pers - baseline) / scale,
                        baseline,
                        scale,
                        branch,
                    }
                }
                None => {
                    let scale = group_std + cfg.epsilon;
                    PersTerm {
                        advantage: (r.reward_pers - group_mean) / scale,
                        baseline: group_mean,
                        scale,
                        branch: BaselineBranch::Fallback,
                    }
                }
            };
            Ok(term)
        })
        .collect()
}

/// `(R_pers - b_{u,g}) / (sqrt(v_u) + eps)` for every record of the group.
pub fn compute_pers_advantages(
    group: &[TrajectoryRecord],
    store: &AnchorStore,
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>> {
    Ok(pers_advantage_terms(group, store, cfg)?
        .into_iter()
        .map(|t| t.advantage)
        .collect())
}

pub fn fuse_advantages(a_base: &[f64], a_pers: &[f64], cfg: &AdvantageConfig) -> Result<Vec<f64>> {
    if a_base.len() != a_pers.len() {
        return Err(AdvantageError::LengthMismatch(a_base.len(), a_pers.len()));
    }
    Ok(a_base
        .iter()
        .zip(a_pers)
        .map(|(b, p)| cfg.w_base * b + cfg.w_pers * p)
        .collect())
}

/// Full dual-track advantage for one prompt group, using the anchors as they
/// are *before* this batch's update.
pub fn compute_parpo_advantages(
    group: &[TrajectoryRecord],
    store: &AnchorStore,
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>> {
    let base = compute_base_advantages(group, cfg)?;
    let pers = compute_pers_advantages(group, store, cfg)?;
    fuse_advantages(&base, &pers, cfg)
}

/// Decoupled estimator without anchors: both tracks standardized in-group.
pub fn compute_noanchor_advantages(group: &[TrajectoryRecord], cfg: &AdvantageConfig) -> Result<Vec<f64>> {
    let base = compute_base_advantages(group, cfg)?;
    let pers: Vec<f64> = group.iter().map(|r| r.reward_pers).collect();
    let pers = stats::standardize(&pers, cfg.epsilon);
    fuse_advantages(&base, &pers, cfg)
}

/// Pooled normalization over every record regardless of user or group.
/// `total` selects the scalar reward, typically `|r| r.total_reward(alpha)`.
pub fn compute_grpo_advantages<F>(records: &[TrajectoryRecord], epsilon: f64, total: F) -> Result<Vec<f64>>
where
    F: Fn(&TrajectoryRecord) -> f64,
{
    if records.is_empty() {
        return Err(AdvantageError::EmptyGroup);
    }
    let mut totals = Vec::with_capacity(records.len());
    for r in records {
        r.check_finite()?;
        totals.push(total(r));
    }
    Ok(stats::standardize(&totals, epsilon))
}

fn loss_inputs<'a>(
    records: &'a [TrajectoryRecord],
    advantages: &'a [f64],
) -> Result<impl Iterator<Item = (f64, f64)> + 'a> {
    if records.len() != advantages.len() {
        return Err(AdvantageError::LengthMismatch(records.len(), advantages.len()));
    }
    if records.is_empty() {
        return Err(AdvantageError::EmptyGroup);
    }
    for r in records {
        r.check_finite()?;
        if r.ratio.is_none() {
            return Err(AdvantageError::MissingRatio(r.trajectory_id.clone()));
        }
    }
    Ok(records
        .iter()
        .zip(advantages)
        .map(|(r, &a)| (r.ratio.unwrap_or(1.0), a)))
}

/// `(1/B) sum_i max(-r_i A_i, -clip(r_i, 1-eta, 1+eta) A_i)`.
///
/// KL regularization is not part of this objective.
pub fn clipped_policy_loss(
    records: &[TrajectoryRecord],
    advantages: &[f64],
    cfg: &AdvantageConfig,
) -> Result<f64> {
    let n = records.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    let sum: f64 = loss_inputs(records, advantages)?
        .map(|(r, a)| (-r * a).max(-r.clamp(lo, hi) * a))
        .sum();
    Ok(sum / n)
}

/// Derivative of [`clipped_policy_loss`] with respect to each ratio.
///
/// Zero where the clipped branch is strictly active; at ties the unclipped
/// branch's derivative is used.
pub fn clipped_policy_loss_grad(
    records: &[TrajectoryRecord],
    advantages: &[f64],
    cfg: &AdvantageConfig,
) -> Result<Vec<f64>> {
    let n = records.len() as f64;
    let (lo, hi) = (1.0 - cfg.clip, 1.0 + cfg.clip);
    Ok(loss_inputs(records, advantages)?
        .map(|(r, a)| {
            let unclipped = -r * a;
            let clipped = -r.clamp(lo, hi) * a;
            if unclipped >= clipped {
                -a / n
            } else {
                0.0
            }
        })
        .collect())
}
