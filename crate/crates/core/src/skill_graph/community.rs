//! Modularity and deterministic hierarchical Louvain clustering on the
//! undirected weighted projection of the graph.
//!
//! Every edge kind contributes its weight and parallel edges sum. A self-loop
//! of weight `w` adds `2w` to its node's degree.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{GraphError, Result, SkillGraph};

/// Smallest modularity gain that counts as an improvement.
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunityAssignment {
    /// Node id to community id, finest level first.
    pub levels: Vec<BTreeMap<String, usize>>,
    /// Modularity of each level on the original graph.
    pub modularity: Vec<f64>,
    pub selected_level: usize,
}

impl CommunityAssignment {
    pub fn community_count(&self, level: usize) -> usize {
        self.levels.get(level).map_or(0, |l| {
            let mut ids: Vec<usize> = l.values().copied().collect();
            ids.sort_unstable();
            ids.dedup();
            ids.len()
        })
    }

    /// Community of `node` at the selected level.
    pub fn selected(&self, node: &str) -> Option<usize> {
        self.levels.get(self.selected_level).and_then(|l| l.get(node).copied())
    }
}

/// Undirected weighted graph over dense indices.
#[derive(Debug, Clone)]
pub(crate) struct Projected {
    /// Neighbor weights excluding self-loops, ascending neighbor index.
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    degree: Vec<f64>,
    /// Total edge weight `m`.
    total: f64,
}

impl Projected {
    fn from_weights(n: usize, pairs: &BTreeMap<(usize, usize), f64>) -> Self {
        let mut adj = vec![Vec::new(); n];
        let mut self_loops = vec![0.0; n];
        let mut degree = vec![0.0; n];
        let mut total = 0.0;
        for (&(a, b), &w) in pairs {
            total += w;
            if a == b {
                self_loops[a] += w;
                degree[a] += 2.0 * w;
            } else {
                adj[a].push((b, w));
                adj[b].push((a, w));
                degree[a] += w;
                degree[b] += w;
            }
        }
        for row in &mut adj {
            row.sort_by_key(|e| e.0);
        }
        Self {
            adj,
            self_loops,
            degree,
            total,
        }
    }

    pub(crate) fn from_graph(g: &SkillGraph) -> (Vec<String>, Self) {
        let ids: Vec<String> = g.nodes.keys().cloned().collect();
        let index: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for ((s, d, _), &w) in &g.edges {
            let (a, b) = (index[s.as_str()], index[d.as_str()]);
            *pairs.entry((a.min(b), a.max(b))).or_insert(0.0) += w;
        }
        let p = Self::from_weights(ids.len(), &pairs);
        (ids, p)
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    pub(crate) fn modularity(&self, community: &[usize]) -> f64 {
        if self.total <= 0.0 {
            return 0.0;
        }
        let two_m = 2.0 * self.total;
        let k = community.iter().copied().max().map_or(0, |c| c + 1);
        let mut inside = vec![0.0; k];
        let mut tot = vec![0.0; k];
        for i in 0..self.len() {
            let c = community[i];
            tot[c] += self.degree[i];
            inside[c] += 2.0 * self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                if community[j] == c {
                    inside[c] += w;
                }
            }
        }
        inside
            .iter()
            .zip(&tot)
            .map(|(&a, &t)| a / two_m - (t / two_m) * (t / two_m))
            .sum()
    }

    /// One local-moving phase. Returns the relabelled partition
    /// (0..k in order of first appearance) and whether anything moved.
    fn local_moves(&self) -> (Vec<usize>, bool) {
        let n = self.len();
        let m = self.total;
        let mut community: Vec<usize> = (0..n).collect();
        let mut tot: Vec<f64> = self.degree.clone();
        let mut moved_any = false;
        if m <= 0.0 {
            return (community, false);
        }
        loop {
            let mut moved = false;
            for i in 0..n {
                let ki = self.degree[i];
                let own = community[i];
                // Weight from i to each neighboring community.
                let mut links: BTreeMap<usize, f64> = BTreeMap::new();
                for &(j, w) in &self.adj[i] {
                    *links.entry(community[j]).or_insert(0.0) += w;
                }
                tot[own] -= ki;
                let gain = |c: usize, l: f64, tot: &[f64]| l / m - tot[c] * ki / (2.0 * m * m);
                let mut best = own;
                let mut best_gain = gain(own, links.get(&own).copied().unwrap_or(0.0), &tot);
                for (&c, &l) in &links {
                    if c == own {
                        continue;
                    }
                    let g = gain(c, l, &tot);
                    if g > best_gain + MIN_GAIN {
                        best = c;
                        best_gain = g;
                    }
                }
                tot[best] += ki;
                if best != own {
                    community[i] = best;
                    moved = true;
                    moved_any = true;
                }
            }
            if !moved {
                break;
            }
        }
        (relabel(&community), moved_any)
    }

    fn aggregate(&self, community: &[usize]) -> Self {
        let k = community.iter().copied().max().map_or(0, |c| c + 1);
        let mut pairs: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for i in 0..self.len() {
            let ci = community[i];
            if self.self_loops[i] > 0.0 {
                *pairs.entry((ci, ci)).or_insert(0.0) += self.self_loops[i];
            }
            for &(j, w) in &self.adj[i] {
                // Each undirected edge appears twice in `adj`.
                if j > i {
                    let cj = community[j];
                    *pairs.entry((ci.min(cj), ci.max(cj))).or_insert(0.0) += w;
                }
            }
        }
        Self::from_weights(k, &pairs)
    }
}

fn relabel(community: &[usize]) -> Vec<usize> {
    let mut map: BTreeMap<usize, usize> = BTreeMap::new();
    community
        .iter()
        .map(|c| {
            let next = map.len();
            *map.entry(*c).or_insert(next)
        })
        .collect()
}

/// Modularity of a partition given as node id to community label.
pub fn modularity(g: &SkillGraph, partition: &BTreeMap<String, usize>) -> Result<f64> {
    let (ids, p) = Projected::from_graph(g);
    let labels: Vec<usize> = ids
        .iter()
        .map(|id| partition.get(id).copied().ok_or_else(|| GraphError::IncompletePartition(id.clone())))
        .collect::<Result<_>>()?;
    Ok(p.modularity(&relabel(&labels)))
}

/// Hierarchical Louvain with nodes visited in ascending id order.
pub fn detect_communities(g: &SkillGraph) -> CommunityAssignment {
    let (ids, base) = Projected::from_graph(g);
    let mut membership: Vec<usize> = (0..ids.len()).collect();
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut current = base.clone();
    loop {
        let (part, moved) = current.local_moves();
        if !moved {
            break;
        }
        for c in membership.iter_mut() {
            *c = part[*c];
        }
        levels.push(membership.clone());
        current = current.aggregate(&part);
    }
    if levels.is_empty() {
        levels.push(membership);
    }
    let modularity: Vec<f64> = levels.iter().map(|l| base.modularity(l)).collect();
    let selected_level = levels
        .iter()
        .rposition(|l| l.iter().copied().max().map_or(0, |c| c + 1) >= 2)
        .unwrap_or(0);
    let levels = levels
        .into_iter()
        .map(|l| ids.iter().cloned().zip(l).collect())
        .collect();
    CommunityAssignment {
        levels,
        modularity,
        selected_level,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skill_graph::{EdgeKind, GraphEdge, GraphNode, NodeKind};

    fn graph(n: usize, edges: &[(usize, usize)]) -> SkillGraph {
        let mut g = SkillGraph::new();
        for i in 0..n {
            g.upsert_node(GraphNode::new(format!("n{i}"), NodeKind::Skill)).unwrap();
        }
        for &(a, b) in edges {
            g.upsert_edge(GraphEdge::new(format!("n{a}"), format!("n{b}"), EdgeKind::Complement, 1.0))
                .unwrap();
        }
        g
    }

    fn part(labels: &[usize]) -> BTreeMap<String, usize> {
        labels.iter().enumerate().map(|(i, &c)| (format!("n{i}"), c)).collect()
    }

    #[test]
    fn single_edge_one_community() {
        let g = graph(2, &[(0, 1)]);
        assert_eq!(modularity(&g, &part(&[0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn two_triangles() {
        let g = graph(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]);
        assert!((modularity(&g, &part(&[0, 0, 0, 1, 1, 1])).unwrap() - 0.5).abs() < 1e-12);
        let c = detect_communities(&g);
        assert_eq!(c.community_count(c.selected_level), 2);
    }

    #[test]
    fn singletons_are_degree_term() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        // degrees 1, 2, 1; 2m = 4.
        let q = modularity(&g, &part(&[0, 1, 2])).unwrap();
        assert!((q + (1.0 + 4.0 + 1.0) / 16.0).abs() < 1e-15);
    }

    #[test]
    fn empty_and_single_node() {
        let g = graph(1, &[]);
        let c = detect_communities(&g);
        assert_eq!(c.levels.len(), 1);
        assert_eq!(c.community_count(0), 1);
        assert_eq!(c.modularity, vec![0.0]);
        assert_eq!(modularity(&SkillGraph::new(), &BTreeMap::new()).unwrap(), 0.0);
    }

    #[test]
    fn missing_label_rejected() {
        let g = graph(2, &[(0, 1)]);
        assert!(matches!(modularity(&g, &part(&[0])), Err(GraphError::IncompletePartition(_))));
    }

    #[test]
    fn self_loop_convention() {
        // Self-loop of weight 1 on n0 plus edge n0-n1: m = 2, k0 = 3, k1 = 1.
        let g = graph(2, &[(0, 0), (0, 1)]);
        let q = modularity(&g, &part(&[0, 1])).unwrap();
        assert!((q - (2.0 / 4.0 - 9.0 / 16.0 - 1.0 / 16.0)).abs() < 1e-15);
    }
}
