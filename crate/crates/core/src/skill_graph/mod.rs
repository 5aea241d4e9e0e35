//! Typed skill-evolution graph with community detection and graph-aware
//! skill retrieval.

pub mod community;
pub mod io;
pub mod retrieval;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use community::{detect_communities, modularity, CommunityAssignment};
pub use retrieval::{expand_two_hop, score_skill, semantic_topm, RetrievalConfig, ScoreBreakdown};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("edge {src} -> {dst} references a missing node")]
    DanglingEdge { src: String, dst: String },
    #[error("edge weight must lie in [0, 1], got {0}")]
    InvalidWeight(f64),
    #[error("owns edges must run from a user to a skill ({src} -> {dst})")]
    InvalidOwns { src: String, dst: String },
    #[error("node {0} already has edges; its kind cannot change")]
    KindChange(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown user {0}")]
    UnknownUser(String),
    #[error("node {0} has no embedding")]
    MissingEmbedding(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("partition does not cover node {0}")]
    IncompletePartition(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("malformed graph document: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    User,
    Skill,
    Tool,
    Scenario,
    Trajectory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Owns,
    Applicability,
    Complement,
    Conflict,
    ExecutionHistory,
    ScenarioTrigger,
}

impl NodeKind {
    pub const ALL: [NodeKind; 5] = [
        NodeKind::User,
        NodeKind::Skill,
        NodeKind::Tool,
        NodeKind::Scenario,
        NodeKind::Trajectory,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            NodeKind::User => "user",
            NodeKind::Skill => "skill",
            NodeKind::Tool => "tool",
            NodeKind::Scenario => "scenario",
            NodeKind::Trajectory => "trajectory",
        }
    }
}

impl EdgeKind {
    pub const ALL: [EdgeKind; 6] = [
        EdgeKind::Owns,
        EdgeKind::Applicability,
        EdgeKind::Complement,
        EdgeKind::Conflict,
        EdgeKind::ExecutionHistory,
        EdgeKind::ScenarioTrigger,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EdgeKind::Owns => "owns",
            EdgeKind::Applicability => "applicability",
            EdgeKind::Complement => "complement",
            EdgeKind::Conflict => "conflict",
            EdgeKind::ExecutionHistory => "execution_history",
            EdgeKind::ScenarioTrigger => "scenario_trigger",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown node kind {s:?}"))
    }
}

impl FromStr for EdgeKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown edge kind {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub kind: NodeKind,
    #[serde(default)]
    pub embedding: Option<Vec<f64>>,
    #[serde(default)]
    pub payload: String,
}

impl GraphNode {
    pub fn new(id: impl Into<String>, kind: NodeKind) -> Self {
        Self {
            id: id.into(),
            kind,
            embedding: None,
            payload: String::new(),
        }
    }

    pub fn with_embedding(mut self, e: Vec<f64>) -> Self {
        self.embedding = Some(e);
        self
    }

    pub fn with_payload(mut self, p: impl Into<String>) -> Self {
        self.payload = p.into();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: String,
    pub dst: String,
    pub kind: EdgeKind,
    pub weight: f64,
}

impl GraphEdge {
    pub fn new(src: impl Into<String>, dst: impl Into<String>, kind: EdgeKind, weight: f64) -> Self {
        Self {
            src: src.into(),
            dst: dst.into(),
            kind,
            weight,
        }
    }
}

type EdgeKey = (String, String, EdgeKind);

/// Typed multigraph: at most one edge per `(src, dst, kind)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkillGraph {
    nodes: BTreeMap<String, GraphNode>,
    edges: BTreeMap<EdgeKey, f64>,
    /// `(dst, src, kind)` for incoming lookups.
    incoming: BTreeSet<EdgeKey>,
    revision: u64,
    communities: Option<CommunityAssignment>,
    stale: bool,
}

impl SkillGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    /// True when a structural change happened after the last community refresh.
    pub fn is_stale(&self) -> bool {
        self.stale || self.communities.is_none()
    }

    pub fn node(&self, id: &str) -> Option<&GraphNode> {
        self.nodes.get(id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = GraphEdge> + '_ {
        self.edges
            .iter()
            .map(|((s, d, k), &w)| GraphEdge::new(s.clone(), d.clone(), *k, w))
    }

    pub fn skills(&self) -> impl Iterator<Item = &GraphNode> {
        self.nodes.values().filter(|n| n.kind == NodeKind::Skill)
    }

    /// Outgoing `(dst, kind, weight)` of `id`.
    pub fn out_edges<'a>(&'a self, id: &'a str) -> impl Iterator<Item = (&'a str, EdgeKind, f64)> + 'a {
        let lo = (id.to_string(), String::new(), EdgeKind::Owns);
        self.edges
            .range(lo..)
            .take_while(move |((s, _, _), _)| s == id)
            .map(|((_, d, k), &w)| (d.as_str(), *k, w))
    }

    /// Incoming `(src, kind, weight)` of `id`.
    pub fn in_edges<'a>(&'a self, id: &'a str) -> impl Iterator<Item = (&'a str, EdgeKind, f64)> + 'a {
        let lo = (id.to_string(), String::new(), EdgeKind::Owns);
        self.incoming
            .range(lo..)
            .take_while(move |(d, _, _)| d == id)
            .map(move |(d, s, k)| (s.as_str(), *k, self.edges[&(s.clone(), d.clone(), *k)]))
    }

    fn touch(&mut self) -> u64 {
        self.revision += 1;
        self.stale = true;
        self.revision
    }

    /// Insert or replace a node. Identical payloads leave the revision unchanged.
    pub fn upsert_node(&mut self, node: GraphNode) -> Result<u64> {
        if let Some(e) = &node.embedding {
            if e.iter().any(|x| !x.is_finite()) {
                return Err(GraphError::InvalidConfig(format!("node {} has a non-finite embedding", node.id)));
            }
        }
        match self.nodes.get(&node.id) {
            Some(old) if *old == node => return Ok(self.revision),
            Some(old) if old.kind != node.kind => {
                let has_edges = self.out_edges(&node.id).next().is_some() || self.in_edges(&node.id).next().is_some();
                if has_edges {
                    return Err(GraphError::KindChange(node.id));
                }
            }
            _ => {}
        }
        self.nodes.insert(node.id.clone(), node);
        Ok(self.touch())
    }

    /// Insert or reweight an edge. Both endpoints must already exist.
    pub fn upsert_edge(&mut self, edge: GraphEdge) -> Result<u64> {
        if !(0.0..=1.0).contains(&edge.weight) {
            return Err(GraphError::InvalidWeight(edge.weight));
        }
        let (Some(src), Some(dst)) = (self.nodes.get(&edge.src), self.nodes.get(&edge.dst)) else {
            return Err(GraphError::DanglingEdge {
                src: edge.src,
                dst: edge.dst,
            });
        };
        if edge.kind == EdgeKind::Owns && (src.kind != NodeKind::User || dst.kind != NodeKind::Skill) {
            return Err(GraphError::InvalidOwns {
                src: edge.src,
                dst: edge.dst,
            });
        }
        let key = (edge.src.clone(), edge.dst.clone(), edge.kind);
        if self.edges.get(&key) == Some(&edge.weight) {
            return Ok(self.revision);
        }
        self.incoming.insert((edge.dst, edge.src, edge.kind));
        self.edges.insert(key, edge.weight);
        Ok(self.touch())
    }

    /// Cached communities if fresh, else a freshly computed assignment.
    pub fn communities(&self) -> std::borrow::Cow<'_, CommunityAssignment> {
        match (&self.communities, self.stale) {
            (Some(c), false) => std::borrow::Cow::Borrowed(c),
            _ => std::borrow::Cow::Owned(detect_communities(self)),
        }
    }

    /// Recompute communities if stale and cache them.
    pub fn refresh_communities(&mut self) -> &CommunityAssignment {
        if self.is_stale() {
            self.communities = Some(detect_communities(self));
            self.stale = false;
        }
        self.communities.as_ref().expect("just computed")
    }

    pub fn cached_communities(&self) -> Option<&CommunityAssignment> {
        self.communities.as_ref()
    }

    /// Rank skills for `user` given a query embedding.
    pub fn retrieve(&self, query: &[f64], user: &str, cfg: &RetrievalConfig) -> Result<Vec<ScoreBreakdown>> {
        retrieval::retrieve(self, query, user, cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idempotent_upserts() {
        let mut g = SkillGraph::new();
        let r1 = g.upsert_node(GraphNode::new("s1", NodeKind::Skill)).unwrap();
        let r2 = g.upsert_node(GraphNode::new("s1", NodeKind::Skill)).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(g.node_count(), 1);
        g.upsert_node(GraphNode::new("u", NodeKind::User)).unwrap();
        let r = g.upsert_edge(GraphEdge::new("u", "s1", EdgeKind::Owns, 1.0)).unwrap();
        assert_eq!(g.upsert_edge(GraphEdge::new("u", "s1", EdgeKind::Owns, 1.0)).unwrap(), r);
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn edge_validation() {
        let mut g = SkillGraph::new();
        assert!(matches!(
            g.upsert_edge(GraphEdge::new("a", "b", EdgeKind::Complement, 0.5)),
            Err(GraphError::DanglingEdge { .. })
        ));
        g.upsert_node(GraphNode::new("a", NodeKind::Skill)).unwrap();
        g.upsert_node(GraphNode::new("b", NodeKind::Skill)).unwrap();
        assert!(matches!(
            g.upsert_edge(GraphEdge::new("a", "b", EdgeKind::Owns, 0.5)),
            Err(GraphError::InvalidOwns { .. })
        ));
        assert!(matches!(
            g.upsert_edge(GraphEdge::new("a", "b", EdgeKind::Conflict, 1.5)),
            Err(GraphError::InvalidWeight(_))
        ));
        g.upsert_edge(GraphEdge::new("a", "b", EdgeKind::Conflict, 0.5)).unwrap();
        assert!(matches!(g.upsert_node(GraphNode::new("a", NodeKind::Tool)), Err(GraphError::KindChange(_))));
    }

    #[test]
    fn changes_mark_stale() {
        let mut g = SkillGraph::new();
        g.upsert_node(GraphNode::new("a", NodeKind::Skill)).unwrap();
        g.refresh_communities();
        assert!(!g.is_stale());
        g.upsert_node(GraphNode::new("b", NodeKind::Skill)).unwrap();
        assert!(g.is_stale());
        g.refresh_communities();
        g.upsert_edge(GraphEdge::new("a", "b", EdgeKind::Complement, 0.2)).unwrap();
        assert!(g.is_stale());
    }

    #[test]
    fn incoming_lookup() {
        let mut g = SkillGraph::new();
        for (id, k) in [("u", NodeKind::User), ("s", NodeKind::Skill), ("t", NodeKind::Skill)] {
            g.upsert_node(GraphNode::new(id, k)).unwrap();
        }
        g.upsert_edge(GraphEdge::new("u", "s", EdgeKind::Owns, 1.0)).unwrap();
        g.upsert_edge(GraphEdge::new("t", "s", EdgeKind::Complement, 0.4)).unwrap();
        let inc: Vec<_> = g.in_edges("s").collect();
        assert_eq!(inc, vec![("t", EdgeKind::Complement, 0.4), ("u", EdgeKind::Owns, 1.0)]);
        assert_eq!(g.out_edges("u").count(), 1);
        assert_eq!(g.out_edges("s").count(), 0);
    }
}
