//! Text serialization for models and statistics, and interaction loading.
//!
//! Models are written as a header line followed by named sections, each
//! introduced by `<name> <rows> <cols>` and holding `rows` lines of `cols`
//! whitespace-separated floats. Floats use the shortest representation that
//! parses back to the same bits, so a round trip is exact.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use super::cf::{Adjacency, CfModel, Interaction, LossWeights};
use super::inference::RewardStats;
use super::profile::FusionParams;
use super::{Result, RewardModelError};

fn write_section<W: Write>(w: &mut W, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    debug_assert_eq!(data.len(), rows * cols);
    writeln!(w, "{name} {rows} {cols}")?;
    for r in 0..rows {
        let line: Vec<String> = data[r * cols..(r + 1) * cols].iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    Ok(())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(r: R) -> Self {
        Self {
            inner: r.lines(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> RewardModelError {
        RewardModelError::Parse {
            line: self.line,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<Option<String>> {
        match self.inner.next() {
            None => Ok(None),
            Some(l) => {
                self.line += 1;
                Ok(Some(l?))
            }
        }
    }

    fn expect_line(&mut self) -> Result<String> {
        self.next_line()?.ok_or_else(|| self.err("unexpected end of file"))
    }

    fn header(&mut self, tag: &str, fields: usize) -> Result<Vec<String>> {
        let l = self.expect_line()?;
        let toks: Vec<String> = l.split_whitespace().map(str::to_string).collect();
        if toks.first().map(String::as_str) != Some(tag) || toks.len() != fields + 1 {
            return Err(self.err(format!("expected '{tag}' with {fields} fields")));
        }
        Ok(toks[1..].to_vec())
    }

    fn floats(&mut self, expected: usize) -> Result<Vec<f64>> {
        let l = self.expect_line()?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| self.err(format!("bad number {t:?}: {e}"))))
            .collect::<Result<_>>()?;
        if vals.len() != expected {
            return Err(self.err(format!("expected {expected} values, got {}", vals.len())));
        }
        Ok(vals)
    }

    /// Reads a section and returns `(rows, cols, data)`.
    fn section(&mut self, name: &str) -> Result<(usize, usize, Vec<f64>)> {
        let h = self.header(name, 2)?;
        let rows = parse_usize(self, &h[0])?;
        let cols = parse_usize(self, &h[1])?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend(self.floats(cols)?);
        }
        Ok((rows, cols, data))
    }

    fn section_of(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (r, c, data) = self.section(name)?;
        if r != rows || c != cols {
            return Err(self.err(format!("section {name} should be {rows} x {cols}, got {r} x {c}")));
        }
        Ok(data)
    }
}

fn parse_usize<R: BufRead>(l: &Lines<R>, t: &str) -> Result<usize> {
    t.parse().map_err(|_| l.err(format!("bad integer {t:?}")))
}

const ENCODERS: [&str; 3] = ["interest_encoder", "conformity_encoder", "action_encoder"];

pub fn write_model<W: Write>(m: &CfModel, mut w: W) -> Result<()> {
    let d = m.dim;
    writeln!(w, "cfmodel 1 {} {} {} {}", m.n_users, m.n_items, d, m.layers)?;
    let lw = m.weights;
    write_section(
        &mut w,
        "scalars",
        1,
        8,
        &[m.tau, m.branch_temperature, lw.int, lw.conf, lw.orth, lw.user, lw.reg, lw.align],
    )?;
    let users_end = m.n_users * d;
    let items_end = users_end + m.n_items * d;
    write_section(&mut w, "user_table", m.n_users, d, &m.params[..users_end])?;
    write_section(&mut w, "item_table", m.n_items, d, &m.params[users_end..items_end])?;
    let block = 2 * d * d + 2 * d;
    for (k, name) in ENCODERS.iter().enumerate() {
        let o = items_end + k * block;
        write_section(&mut w, name, 1, block, &m.params[o..o + block])?;
    }
    let o = items_end + 3 * block;
    write_section(&mut w, "branch_attention", 1, m.params.len() - o, &m.params[o..])?;
    write_section(&mut w, "popularity", 1, m.n_items, &m.popularity)?;
    let entries: Vec<f64> = m
        .adjacency
        .entries()
        .flat_map(|(r, c, v)| [r as f64, c as f64, v])
        .collect();
    write_section(&mut w, "adjacency", entries.len() / 3, 3, &entries)?;
    match &m.item_text {
        Some(t) => {
            let flat: Vec<f64> = t.iter().flatten().copied().collect();
            write_section(&mut w, "item_text", m.n_items, d, &flat)?;
        }
        None => write_section(&mut w, "item_text", 0, d, &[])?,
    }
    writeln!(w, "end")?;
    Ok(())
}

pub fn read_model<R: BufRead>(r: R) -> Result<CfModel> {
    let mut l = Lines::new(r);
    let h = l.header("cfmodel", 5)?;
    if h[0] != "1" {
        return Err(l.err(format!("unsupported model version {}", h[0])));
    }
    let n_users = parse_usize(&l, &h[1])?;
    let n_items = parse_usize(&l, &h[2])?;
    let d = parse_usize(&l, &h[3])?;
    let layers = parse_usize(&l, &h[4])?;
    let s = l.section_of("scalars", 1, 8)?;
    let mut params = l.section_of("user_table", n_users, d)?;
    params.extend(l.section_of("item_table", n_items, d)?);
    let block = 2 * d * d + 2 * d;
    for name in ENCODERS {
        params.extend(l.section_of(name, 1, block)?);
    }
    params.extend(l.section_of("branch_attention", 1, 2 * d * d + 2 * d)?);
    let popularity = l.section_of("popularity", 1, n_items)?;
    let (nnz, _, adj) = l.section("adjacency")?;
    let entries: Vec<(usize, usize, f64)> = (0..nnz)
        .map(|k| (adj[3 * k] as usize, adj[3 * k + 1] as usize, adj[3 * k + 2]))
        .collect();
    let adjacency = Adjacency::from_entries(n_users + n_items, &entries)?;
    let (text_rows, _, text) = l.section("item_text")?;
    let item_text = match text_rows {
        0 => None,
        n if n == n_items => Some(text.chunks(d).map(|c| c.to_vec()).collect()),
        n => return Err(l.err(format!("item_text has {n} rows for {n_items} items"))),
    };
    if l.expect_line()?.trim() != "end" {
        return Err(l.err("expected 'end'"));
    }
    Ok(CfModel {
        n_users,
        n_items,
        dim: d,
        layers,
        tau: s[0],
        branch_temperature: s[1],
        weights: LossWeights {
            int: s[2],
            conf: s[3],
            orth: s[4],
            user: s[5],
            reg: s[6],
            align: s[7],
        },
        params,
        adjacency,
        popularity,
        item_text,
    })
}

pub fn write_stats<W: Write>(s: &RewardStats, mut w: W) -> Result<()> {
    writeln!(w, "rewardstats 1")?;
    write_section(&mut w, "stats", 1, 4, &[s.mu_int, s.sigma_int, s.mu_conf, s.sigma_conf])
}

pub fn read_stats<R: BufRead>(r: R) -> Result<RewardStats> {
    let mut l = Lines::new(r);
    l.header("rewardstats", 1)?;
    let v = l.section_of("stats", 1, 4)?;
    RewardStats::new(v[0], v[1], v[2], v[3])
}

pub fn write_fusion<W: Write>(p: &FusionParams, mut w: W) -> Result<()> {
    writeln!(w, "fusion 1 {} {} {}", p.d, p.d_attn, p.n_views)?;
    write_section(&mut w, "scalars", 1, 2, &[p.tau, p.ln_eps])?;
    write_section(&mut w, "params", 1, p.values.len(), &p.values)
}

pub fn read_fusion<R: BufRead>(r: R) -> Result<FusionParams> {
    let mut l = Lines::new(r);
    let h = l.header("fusion", 4)?;
    let d = parse_usize(&l, &h[1])?;
    let d_attn = parse_usize(&l, &h[2])?;
    let k = parse_usize(&l, &h[3])?;
    let s = l.section_of("scalars", 1, 2)?;
    let values = l.section_of("params", 1, FusionParams::param_count(d, d_attn, k))?;
    let mut p = FusionParams::from_values(d, d_attn, k, values, s[0])?;
    p.ln_eps = s[1];
    Ok(p)
}

/// Interactions keyed by external ids, indexed in order of first appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionData {
    pub users: Vec<String>,
    pub items: Vec<String>,
    pub interactions: Vec<Interaction>,
}

impl InteractionData {
    /// Tab-separated `user_id item_id weight` with a header row.
    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .delimiter(b'\t')
            .comment(Some(b'#'))
            .from_reader(r);
        let headers = rdr
            .headers()
            .map_err(|e| RewardModelError::Parse { line: 1, msg: e.to_string() })?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["user_id", "item_id", "weight"] {
            return Err(RewardModelError::Parse {
                line: 1,
                msg: "expected header user_id, item_id, weight".into(),
            });
        }
        let mut data = Self {
            users: Vec::new(),
            items: Vec::new(),
            interactions: Vec::new(),
        };
        let mut user_idx: HashMap<String, usize> = HashMap::new();
        let mut item_idx: HashMap<String, usize> = HashMap::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| RewardModelError::Parse {
                line: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let bad = |msg: String| RewardModelError::Parse { line, msg };
            if rec.len() != 3 {
                return Err(bad(format!("expected 3 columns, got {}", rec.len())));
            }
            let weight: f64 = rec[2].parse().map_err(|_| bad(format!("bad weight {:?}", &rec[2])))?;
            if !(weight.is_finite() && weight > 0.0) {
                return Err(bad(format!("weight must be positive, got {weight}")));
            }
            let user = *user_idx.entry(rec[0].to_string()).or_insert_with(|| {
                data.users.push(rec[0].to_string());
                data.users.len() - 1
            });
            let item = *item_idx.entry(rec[1].to_string()).or_insert_with(|| {
                data.items.push(rec[1].to_string());
                data.items.len() - 1
            });
            data.interactions.push(Interaction { user, item, weight });
        }
        if data.interactions.is_empty() {
            return Err(RewardModelError::EmptyItems);
        }
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reward_model::cf::CfConfig;

    #[test]
    fn model_round_trip_is_exact() {
        let inter = [
            Interaction { user: 0, item: 1, weight: 1.0 },
            Interaction { user: 1, item: 0, weight: 0.3 },
        ];
        let m = CfModel::new(2, 2, &inter, &CfConfig { dim: 3, ..Default::default() }, 9)
            .unwrap()
            .with_item_text(vec![vec![0.1, 1.0 / 3.0, -2.0], vec![1e-300, 5.0, 7.25]])
            .unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        assert_eq!(read_model(buf.as_slice()).unwrap(), m);
    }

    #[test]
    fn stats_and_fusion_round_trip() {
        let s = RewardStats::new(0.1, 0.7, -1.0 / 3.0, 2.0).unwrap();
        let mut buf = Vec::new();
        write_stats(&s, &mut buf).unwrap();
        assert_eq!(read_stats(buf.as_slice()).unwrap(), s);
        let f = FusionParams::init(3, 2, 2, 0.5, 4).unwrap();
        let mut buf = Vec::new();
        write_fusion(&f, &mut buf).unwrap();
        assert_eq!(read_fusion(buf.as_slice()).unwrap(), f);
    }

    #[test]
    fn interactions_parse_and_reject() {
        let ok = "user_id\titem_id\tweight\na\tx\t1\nb\tx\t2.5\na\ty\t1\n";
        let d = InteractionData::read_from(ok.as_bytes()).unwrap();
        assert_eq!(d.users, ["a", "b"]);
        assert_eq!(d.items, ["x", "y"]);
        assert_eq!(d.interactions[1], Interaction { user: 1, item: 0, weight: 2.5 });
        let bad = "user_id\titem_id\tweight\na\tx\tnope\n";
        assert!(matches!(InteractionData::read_from(bad.as_bytes()), Err(RewardModelError::Parse { line: 2, .. })));
    }

    #[test]
    fn truncated_model_is_rejected() {
        let inter = [Interaction { user: 0, item: 0, weight: 1.0 }];
        let m = CfModel::new(1, 1, &inter, &CfConfig { dim: 2, ..Default::default() }, 1).unwrap();
        let mut buf = Vec::new();
        write_model(&m, &mut buf).unwrap();
        let cut = &buf[..buf.len() / 2];
        assert!(matches!(read_model(cut), Err(RewardModelError::Parse { .. })));
    }
}
