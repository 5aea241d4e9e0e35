//! Graph persistence as JSON and ingestion of line-oriented records.
//!
//! Record files hold one record per line; blank lines and `#` comments are
//! skipped:
//!
//! ```text
//! node <id> <kind> [payload...]
//! embedding <id> <x1> <x2> ...
//! edge <src> <dst> <kind> <weight>
//! ```
//!
//! Nodes are applied first, then embeddings, then edges, so record order
//! within a file does not matter.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{CommunityAssignment, GraphEdge, GraphError, GraphNode, Result, SkillGraph};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    revision: u64,
    stale: bool,
    nodes: Vec<GraphNode>,
    edges: Vec<GraphEdge>,
    communities: Option<CommunityAssignment>,
}

impl SkillGraph {
    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let doc = Document {
            revision: self.revision,
            stale: self.stale,
            nodes: self.nodes.values().cloned().collect(),
            edges: self.edges().collect(),
            communities: self.communities.clone(),
        };
        serde_json::to_writer_pretty(w, &doc)?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_json(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
    }

    /// Rebuilds the graph and validates every edge; nothing is returned on error.
    pub fn read_json<R: Read>(r: R) -> Result<Self> {
        let doc: Document = serde_json::from_reader(r)?;
        let mut g = SkillGraph::new();
        for n in doc.nodes {
            g.upsert_node(n)?;
        }
        for e in doc.edges {
            g.upsert_edge(e)?;
        }
        g.revision = doc.revision;
        g.stale = doc.stale;
        g.communities = doc.communities;
        Ok(g)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::read_json(std::fs::File::open(path)?)
    }
}

/// Apply a record file to `g`.
pub fn ingest_records(g: &mut SkillGraph, text: &str) -> Result<()> {
    let mut nodes = Vec::new();
    let mut embeddings = Vec::new();
    let mut edges = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |msg: String| GraphError::Parse { line, msg };
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = body.split_whitespace().collect();
        match toks[0] {
            "node" => {
                if toks.len() < 3 {
                    return Err(err("node needs an id and a kind".into()));
                }
                let kind = toks[2].parse().map_err(err)?;
                let payload = toks[3..].join(" ");
                nodes.push(GraphNode::new(toks[1], kind).with_payload(payload));
            }
            "embedding" => {
                if toks.len() < 3 {
                    return Err(err("embedding needs an id and at least one value".into()));
                }
                let v = toks[2..]
                    .iter()
                    .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number {t:?}"))))
                    .collect::<Result<Vec<f64>>>()?;
                embeddings.push((line, toks[1].to_string(), v));
            }
            "edge" => {
                if toks.len() != 5 {
                    return Err(err("edge needs src, dst, kind and weight".into()));
                }
                let kind = toks[3].parse().map_err(err)?;
                let w: f64 = toks[4].parse().map_err(|_| err(format!("bad weight {:?}", toks[4])))?;
                edges.push(GraphEdge::new(toks[1], toks[2], kind, w));
            }
            other => return Err(err(format!("unknown record type {other:?}"))),
        }
    }
    for n in nodes {
        g.upsert_node(n)?;
    }
    for (line, id, v) in embeddings {
        let mut n = g
            .node(&id)
            .cloned()
            .ok_or_else(|| GraphError::Parse {
                line,
                msg: format!("embedding for unknown node {id}"),
            })?;
        n.embedding = Some(v);
        g.upsert_node(n)?;
    }
    for e in edges {
        g.upsert_edge(e)?;
    }
    Ok(())
}
