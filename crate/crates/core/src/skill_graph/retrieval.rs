//! Two-stage skill retrieval: semantic top-M, expansion through owners to
//! sibling skills, then a multiplicative graph-aware score.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{CommunityAssignment, EdgeKind, GraphError, NodeKind, Result, SkillGraph};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub top_m: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Boost per unit of complement weight.
    pub kappa: f64,
    pub top_k: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            top_m: 10,
            alpha: 0.3,
            beta: 0.3,
            gamma: 0.2,
            delta: 0.7,
            kappa: 0.1,
            top_k: 5,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_m == 0 || self.top_k == 0 {
            return Err(GraphError::InvalidConfig("top_m and top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(GraphError::InvalidConfig(format!("delta must lie in [0, 1], got {}", self.delta)));
        }
        if !(self.kappa >= 0.0) || ![self.alpha, self.beta, self.gamma].iter().all(|x| x.is_finite()) {
            return Err(GraphError::InvalidConfig("kappa must be >= 0 and weights finite".into()));
        }
        Ok(())
    }
}

/// A scored skill with each factor of its score.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreBreakdown {
    pub skill: String,
    pub score: f64,
    pub f_sem: f64,
    pub f_user: f64,
    pub f_comm: f64,
    pub f_comp: f64,
    pub f_conf: f64,
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn embedding<'a>(g: &'a SkillGraph, id: &str, dim: usize) -> Result<&'a [f64]> {
    let node = g.node(id).ok_or_else(|| GraphError::UnknownNode(id.to_string()))?;
    let e = node
        .embedding
        .as_deref()
        .ok_or_else(|| GraphError::MissingEmbedding(id.to_string()))?;
    if e.len() != dim {
        return Err(GraphError::DimensionMismatch {
            expected: dim,
            got: e.len(),
        });
    }
    Ok(e)
}

/// The `m` skills most similar to `query`, ties by ascending id.
pub fn semantic_topm(g: &SkillGraph, query: &[f64], m: usize) -> Result<Vec<(String, f64)>> {
    let mut scored: Vec<(String, f64)> = g
        .skills()
        .map(|s| Ok((s.id.clone(), cosine(query, embedding(g, &s.id, query.len())?))))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(m);
    Ok(scored)
}

/// Candidates followed by the other skills owned by their owners, ascending
/// id, without repeats.
pub fn expand_two_hop(g: &SkillGraph, candidates: &[String]) -> Vec<String> {
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut out: Vec<String> = Vec::with_capacity(candidates.len());
    for c in candidates {
        if seen.insert(c.as_str()) {
            out.push(c.clone());
        }
    }
    let mut extra: BTreeSet<&str> = BTreeSet::new();
    for c in candidates {
        for (owner, kind, _) in g.in_edges(c) {
            if kind != EdgeKind::Owns {
                continue;
            }
            for (sib, k, _) in g.out_edges(owner) {
                let is_skill = g.node(sib).is_some_and(|n| n.kind == NodeKind::Skill);
                if k == EdgeKind::Owns && is_skill && !seen.contains(sib) {
                    extra.insert(sib);
                }
            }
        }
    }
    out.extend(extra.into_iter().map(str::to_string));
    out
}

/// Sum of weights of `kind` edges touching `id` in either direction.
fn incident_weight(g: &SkillGraph, id: &str, kind: EdgeKind) -> f64 {
    // Fold from +0: an empty f64 sum is -0, which would print as "-0.0000".
    let out = g.out_edges(id).filter(|e| e.1 == kind).fold(0.0, |acc, e| acc + e.2);
    g.in_edges(id)
        .filter(|e| e.1 == kind && e.0 != id)
        .fold(out, |acc, e| acc + e.2)
}

/// 1.0 for a shared community at the selected level, 0.3 when both are
/// assigned to different ones, 0 otherwise.
fn community_tier(comm: &CommunityAssignment, user: &str, skill: &str) -> f64 {
    match (comm.selected(user), comm.selected(skill)) {
        (Some(a), Some(b)) if a == b => 1.0,
        (Some(_), Some(_)) => 0.3,
        _ => 0.0,
    }
}

pub fn score_skill(
    g: &SkillGraph,
    query: &[f64],
    skill: &str,
    user: &str,
    comm: &CommunityAssignment,
    cfg: &RetrievalConfig,
) -> Result<ScoreBreakdown> {
    let s = embedding(g, skill, query.len())?;
    let u = embedding(g, user, query.len())?;
    let f_sem = cosine(query, s);
    let f_user = cosine(u, s);
    let f_comm = community_tier(comm, user, skill);
    let f_comp = 1.0 + cfg.kappa * incident_weight(g, skill, EdgeKind::Complement);
    let f_conf = incident_weight(g, skill, EdgeKind::Conflict).min(1.0);
    let score = f_sem * (cfg.alpha + cfg.beta * f_user) * (1.0 + cfg.gamma * f_comm) * f_comp * (1.0 - cfg.delta * f_conf);
    Ok(ScoreBreakdown {
        skill: skill.to_string(),
        score,
        f_sem,
        f_user,
        f_comm,
        f_comp,
        f_conf,
    })
}

pub(super) fn retrieve(g: &SkillGraph, query: &[f64], user: &str, cfg: &RetrievalConfig) -> Result<Vec<ScoreBreakdown>> {
    cfg.validate()?;
    if g.skills().next().is_none() {
        return Ok(Vec::new());
    }
    match g.node(user) {
        Some(n) if n.kind == NodeKind::User => {}
        _ => return Err(GraphError::UnknownUser(user.to_string())),
    }
    let comm = g.communities();
    let init: Vec<String> = semantic_topm(g, query, cfg.top_m)?.into_iter().map(|(id, _)| id).collect();
    let candidates = expand_two_hop(g, &init);
    let mut scored: Vec<ScoreBreakdown> = candidates
        .iter()
        .map(|s| score_skill(g, query, s, user, &comm, cfg))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.skill.cmp(&b.skill)));
    scored.truncate(cfg.top_k);
    Ok(scored)
}
