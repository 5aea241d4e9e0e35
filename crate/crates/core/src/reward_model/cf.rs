//! Collaborative preference disentanglement: LightGCN propagation over the
//! user-item graph, interest and conformity branches, branch attention, and
//! the combined recommendation objective.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::autodiff::{gradient, Scalar, Var};
use super::linalg::{cosine, dot, lift, logsumexp, normalize, softmax, values, Mlp};
use super::{Result, RewardModelError};
use crate::gradcheck::{self, GradCheckReport};

/// Stabilizer inside `-log(omega + eps)`.
pub const WEIGHT_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Triplet {
    pub user: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Sparse symmetric matrix over `users ++ items`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Adjacency {
    /// `D^-1/2 A D^-1/2` of the weighted bipartite graph. Repeated pairs sum.
    pub fn normalized(n_users: usize, n_items: usize, interactions: &[Interaction]) -> Result<Self> {
        let n = n_users + n_items;
        let mut w: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for it in interactions {
            if it.user >= n_users || it.item >= n_items {
                return Err(RewardModelError::UnknownIndex(format!("interaction ({}, {})", it.user, it.item)));
            }
            if !(it.weight.is_finite() && it.weight > 0.0) {
                return Err(RewardModelError::InvalidConfig(format!(
                    "interaction weight must be positive, got {}",
                    it.weight
                )));
            }
            *w.entry((it.user, n_users + it.item)).or_insert(0.0) += it.weight;
        }
        let mut degree = vec![0.0; n];
        for (&(a, b), &v) in &w {
            degree[a] += v;
            degree[b] += v;
        }
        let mut rows = vec![Vec::new(); n];
        for (&(a, b), &v) in &w {
            let x = v / (degree[a] * degree[b]).sqrt();
            rows[a].push((b, x));
            rows[b].push((a, x));
        }
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        Ok(Self { rows })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            rows: (0..n).map(|i| vec![(i, 1.0)]).collect(),
        }
    }

    pub fn from_entries(n: usize, entries: &[(usize, usize, f64)]) -> Result<Self> {
        let mut rows = vec![Vec::new(); n];
        for &(r, c, v) in entries {
            if r >= n || c >= n {
                return Err(RewardModelError::UnknownIndex(format!("adjacency entry ({r}, {c})")));
            }
            rows[r].push((c, v));
        }
        for r in &mut rows {
            r.sort_by_key(|e| e.0);
        }
        Ok(Self { rows })
    }

    pub fn size(&self) -> usize {
        self.rows.len()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(c, v)| (r, c, v)))
    }

    fn apply<S: Scalar>(&self, e: &[Vec<S>], d: usize) -> Vec<Vec<S>> {
        self.rows
            .iter()
            .map(|row| {
                let mut out = vec![S::cst(0.0); d];
                for &(c, v) in row {
                    for (o, &x) in out.iter_mut().zip(&e[c]) {
                        *o = *o + x.scale(v);
                    }
                }
                out
            })
            .collect()
    }
}

/// Min-max normalized interaction counts. All-equal counts map to 0.
pub fn popularity(n_items: usize, interactions: &[Interaction]) -> Vec<f64> {
    let mut counts = vec![0.0; n_items];
    for it in interactions {
        if it.item < n_items {
            counts[it.item] += 1.0;
        }
    }
    let lo = counts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = counts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.0; n_items];
    }
    counts.iter().map(|c| (c - lo) / (hi - lo)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub int: f64,
    pub conf: f64,
    pub orth: f64,
    pub user: f64,
    pub reg: f64,
    pub align: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            int: 0.2,
            conf: 0.2,
            orth: 0.1,
            user: 3.0,
            reg: 1e-4,
            align: 0.5,
        }
    }
}

impl LossWeights {
    /// Only the recommendation term.
    pub fn rec_only() -> Self {
        Self {
            int: 0.0,
            conf: 0.0,
            orth: 0.0,
            user: 0.0,
            reg: 0.0,
            align: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CfConfig {
    pub dim: usize,
    pub layers: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Branch-attention temperature.
    pub branch_temperature: f64,
    pub init_std: f64,
    pub weights: LossWeights,
}

impl Default for CfConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            layers: 2,
            tau: 0.2,
            branch_temperature: 1.0,
            init_std: 0.1,
            weights: LossWeights::default(),
        }
    }
}

/// Which two-layer encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoder {
    Interest = 0,
    Conformity = 1,
    Action = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfModel {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub layers: usize,
    pub tau: f64,
    pub branch_temperature: f64,
    pub weights: LossWeights,
    /// Embedding tables followed by encoder and branch-attention weights.
    pub params: Vec<f64>,
    pub adjacency: Adjacency,
    pub popularity: Vec<f64>,
    /// Optional text embedding per item, same dimension as the model.
    pub item_text: Option<Vec<Vec<f64>>>,
}

/// Per-user branch outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Branches<S> {
    pub int: Vec<S>,
    pub conf: Vec<S>,
    pub int_hat: Vec<S>,
    pub conf_hat: Vec<S>,
    pub alpha: [S; 2],
    pub fused: Vec<S>,
}

/// Stage-2 loss with its unweighted terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage2Loss<S> {
    pub rec: S,
    pub int: S,
    pub conf: S,
    pub orth: S,
    pub user: S,
    pub reg: S,
    pub align: S,
    pub total: S,
}

impl<S: Scalar> Stage2Loss<S> {
    pub fn values(&self) -> Stage2Loss<f64> {
        Stage2Loss {
            rec: self.rec.value(),
            int: self.int.value(),
            conf: self.conf.value(),
            orth: self.orth.value(),
            user: self.user.value(),
            reg: self.reg.value(),
            align: self.align.value(),
            total: self.total.value(),
        }
    }
}

impl Stage2Loss<f64> {
    /// Weighted sum of the terms, recomputed.
    pub fn weighted_sum(&self, w: &LossWeights) -> f64 {
        self.rec
            + w.int * self.int
            + w.conf * self.conf
            + w.orth * self.orth
            + w.user * self.user
            + w.reg * self.reg
            + w.align * self.align
    }
}

pub const STAGE2_TERMS: [&str; 8] = ["rec", "int", "conf", "orth", "user", "reg", "align", "total"];

fn pick<S: Copy>(l: &Stage2Loss<S>, name: &str) -> S {
    match name {
        "rec" => l.rec,
        "int" => l.int,
        "conf" => l.conf,
        "orth" => l.orth,
        "user" => l.user,
        "reg" => l.reg,
        "align" => l.align,
        _ => l.total,
    }
}

/// One popularity-weighted contrastive term:
/// `-log(omega + eps) - u.i+/tau + logsumexp_j(u.i_j/tau)`.
pub fn popularity_infonce<S: Scalar>(u: &[S], pos: &[S], pool: &[&[S]], omega: f64, tau: f64) -> S {
    let inv = 1.0 / tau;
    let logits: Vec<S> = pool.iter().map(|i| dot(u, i).scale(inv)).collect();
    S::cst(-(omega + WEIGHT_EPS).ln()) - dot(u, pos).scale(inv) + logsumexp(&logits)
}

impl CfModel {
    fn encoder_block(d: usize) -> usize {
        2 * d * d + 2 * d
    }

    fn tables_len(&self) -> usize {
        (self.n_users + self.n_items) * self.dim
    }

    fn encoder_offset(&self, e: Encoder) -> usize {
        self.tables_len() + e as usize * Self::encoder_block(self.dim)
    }

    fn attn_offset(&self) -> usize {
        self.tables_len() + 3 * Self::encoder_block(self.dim)
    }

    pub fn param_count(n_users: usize, n_items: usize, d: usize) -> usize {
        (n_users + n_items) * d + 3 * Self::encoder_block(d) + 2 * d * d + 2 * d
    }

    /// Fresh model over the given interaction graph.
    pub fn new(n_users: usize, n_items: usize, interactions: &[Interaction], cfg: &CfConfig, seed: u64) -> Result<Self> {
        if n_users == 0 || n_items == 0 {
            return Err(RewardModelError::EmptyItems);
        }
        if cfg.dim == 0 || !(cfg.tau > 0.0) || !(cfg.branch_temperature > 0.0) || !(cfg.init_std >= 0.0) {
            return Err(RewardModelError::InvalidConfig(
                "dim, tau and branch_temperature must be positive".into(),
            ));
        }
        let d = cfg.dim;
        let adjacency = Adjacency::normalized(n_users, n_items, interactions)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let emb = Normal::new(0.0, cfg.init_std).expect("valid std");
        let dense = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let mut model = Self {
            n_users,
            n_items,
            dim: d,
            layers: cfg.layers,
            tau: cfg.tau,
            branch_temperature: cfg.branch_temperature,
            weights: cfg.weights,
            params: vec![0.0; Self::param_count(n_users, n_items, d)],
            adjacency,
            popularity: popularity(n_items, interactions),
            item_text: None,
        };
        let tables = model.tables_len();
        for (i, w) in model.params.iter_mut().enumerate() {
            *w = if i < tables { emb.sample(&mut rng) } else { dense.sample(&mut rng) };
        }
        // Zero biases.
        for e in [Encoder::Interest, Encoder::Conformity, Encoder::Action] {
            let o = model.encoder_offset(e);
            model.params[o + d * d..o + d * d + d].fill(0.0);
            model.params[o + 2 * d * d + d..o + 2 * d * d + 2 * d].fill(0.0);
        }
        Ok(model)
    }

    pub fn with_item_text(mut self, text: Vec<Vec<f64>>) -> Result<Self> {
        if text.len() != self.n_items || text.iter().any(|t| t.len() != self.dim) {
            return Err(RewardModelError::DimensionMismatch(format!(
                "item text must be {} x {}",
                self.n_items, self.dim
            )));
        }
        self.item_text = Some(text);
        Ok(self)
    }

    pub fn encoder<'a, S: Scalar>(&self, p: &'a [S], e: Encoder) -> Mlp<'a, S> {
        let d = self.dim;
        let o = self.encoder_offset(e);
        Mlp {
            w1: &p[o..o + d * d],
            b1: Some(&p[o + d * d..o + d * d + d]),
            w2: &p[o + d * d + d..o + 2 * d * d + d],
            b2: Some(&p[o + 2 * d * d + d..o + 2 * d * d + 2 * d]),
            hidden: d,
            out: d,
        }
    }

    fn branch_attention<'a, S: Scalar>(&self, p: &'a [S]) -> Mlp<'a, S> {
        let d = self.dim;
        let o = self.attn_offset();
        Mlp {
            w1: &p[o..o + 2 * d * d],
            b1: None,
            w2: &p[o + 2 * d * d..o + 2 * d * d + 2 * d],
            b2: None,
            hidden: d,
            out: 2,
        }
    }

    /// LightGCN layer average, split into user and item blocks.
    pub fn propagate_with<S: Scalar>(&self, p: &[S]) -> (Vec<Vec<S>>, Vec<Vec<S>>) {
        let d = self.dim;
        let n = self.n_users + self.n_items;
        let e0: Vec<Vec<S>> = (0..n).map(|r| p[r * d..(r + 1) * d].to_vec()).collect();
        let mut total = e0.clone();
        let mut cur = e0;
        for _ in 0..self.layers {
            cur = self.adjacency.apply(&cur, d);
            for (t, c) in total.iter_mut().zip(&cur) {
                for (a, &b) in t.iter_mut().zip(c) {
                    *a = *a + b;
                }
            }
        }
        let inv = 1.0 / (self.layers as f64 + 1.0);
        let mut all: Vec<Vec<S>> = total
            .into_iter()
            .map(|row| row.into_iter().map(|x| x.scale(inv)).collect())
            .collect();
        let items = all.split_off(self.n_users);
        (all, items)
    }

    pub fn propagate(&self) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        self.propagate_with(&self.params)
    }

    /// Interest and conformity embeddings of a collaborative user vector,
    /// their unit versions, branch attention and the fused unit embedding.
    pub fn branches_with<S: Scalar>(&self, p: &[S], u_cf: &[S]) -> Result<Branches<S>> {
        let int = self.encoder(p, Encoder::Interest).apply(u_cf);
        let conf = self.encoder(p, Encoder::Conformity).apply(u_cf);
        let int_hat = normalize(&int).ok_or(RewardModelError::DegenerateEmbedding)?;
        let conf_hat = normalize(&conf).ok_or(RewardModelError::DegenerateEmbedding)?;
        let mut cat = int_hat.clone();
        cat.extend_from_slice(&conf_hat);
        let logits: Vec<S> = self
            .branch_attention(p)
            .apply(&cat)
            .into_iter()
            .map(|x| x.scale(1.0 / self.branch_temperature))
            .collect();
        let a = softmax(&logits);
        let alpha = [a[0], a[1]];
        let mix: Vec<S> = int_hat
            .iter()
            .zip(&conf_hat)
            .map(|(&i, &c)| alpha[0] * i + alpha[1] * c)
            .collect();
        let fused = normalize(&mix).ok_or(RewardModelError::DegenerateEmbedding)?;
        Ok(Branches {
            int,
            conf,
            int_hat,
            conf_hat,
            alpha,
            fused,
        })
    }

    pub fn fuse_branches(&self, u_cf: &[f64]) -> Result<Branches<f64>> {
        if u_cf.len() != self.dim {
            return Err(RewardModelError::DimensionMismatch("user vector dimension".into()));
        }
        self.branches_with(&self.params, u_cf)
    }

    fn check_batch(&self, batch: &[Triplet]) -> Result<()> {
        if batch.is_empty() {
            return Err(RewardModelError::EmptyNegatives);
        }
        for t in batch {
            if t.user >= self.n_users || t.pos >= self.n_items || t.neg >= self.n_items {
                return Err(RewardModelError::UnknownIndex(format!("{t:?}")));
            }
        }
        Ok(())
    }

    /// Interest and conformity losses for `(user, positive)` pairs against a
    /// shared negative pool; each pair's positive joins its own softmax pool.
    pub fn branch_losses(&self, pairs: &[(usize, usize)], negatives: &[usize]) -> Result<(f64, f64)> {
        if negatives.is_empty() {
            return Err(RewardModelError::EmptyNegatives);
        }
        if pairs.is_empty() {
            return Err(RewardModelError::InvalidConfig("no positive pairs".into()));
        }
        let (users, items) = self.propagate();
        let (mut li, mut lc) = (0.0, 0.0);
        for &(u, pos) in pairs {
            if u >= self.n_users || pos >= self.n_items || negatives.iter().any(|&j| j >= self.n_items) {
                return Err(RewardModelError::UnknownIndex(format!("pair ({u}, {pos})")));
            }
            let b = self.branches_with(&self.params, &users[u])?;
            let mut pool: Vec<&[f64]> = vec![&items[pos]];
            pool.extend(negatives.iter().filter(|&&j| j != pos).map(|&j| items[j].as_slice()));
            let p = self.popularity[pos];
            li += popularity_infonce(&b.int, &items[pos], &pool, (1.0 - p).exp(), self.tau);
            lc += popularity_infonce(&b.conf, &items[pos], &pool, p.exp(), self.tau);
        }
        let n = pairs.len() as f64;
        Ok((li / n, lc / n))
    }

    pub fn stage2_with<S: Scalar>(&self, p: &[S], batch: &[Triplet]) -> Result<Stage2Loss<S>> {
        self.stage2_impl(p, batch, None)
    }

    /// `frozen` supplies the stop-gradient alignment targets; by default they
    /// are the current item embeddings with the gradient cut.
    fn stage2_impl<S: Scalar>(&self, p: &[S], batch: &[Triplet], frozen: Option<&[Vec<f64>]>) -> Result<Stage2Loss<S>> {
        self.check_batch(batch)?;
        let (users, items) = self.propagate_with(p);
        let mut branches: BTreeMap<usize, Branches<S>> = BTreeMap::new();
        for t in batch {
            if let std::collections::btree_map::Entry::Vacant(e) = branches.entry(t.user) {
                e.insert(self.branches_with(p, &users[t.user])?);
            }
        }
        let pool_ids: BTreeSet<usize> = batch.iter().flat_map(|t| [t.pos, t.neg]).collect();
        let pool: Vec<&[S]> = pool_ids.iter().map(|&j| items[j].as_slice()).collect();
        let inv_b = 1.0 / batch.len() as f64;
        let zero = S::cst(0.0);
        let (mut rec, mut int, mut conf, mut orth, mut reg) = (zero, zero, zero, zero, zero);
        for t in batch {
            let b = &branches[&t.user];
            let ip = &items[t.pos];
            let ineg = &items[t.neg];
            rec = rec + (dot(&b.fused, ineg) - dot(&b.fused, ip)).softplus();
            let pop = self.popularity[t.pos];
            int = int + popularity_infonce(&b.int, ip, &pool, (1.0 - pop).exp(), self.tau);
            conf = conf + popularity_infonce(&b.conf, ip, &pool, pop.exp(), self.tau);
            let c = dot(&b.int_hat, &b.conf_hat);
            orth = orth + c * c;
            reg = reg + dot(&users[t.user], &users[t.user]) + dot(ip, ip) + dot(ineg, ineg);
        }
        // Contrast between the unique batch users' fused embeddings.
        let fused: Vec<&Vec<S>> = branches.values().map(|b| &b.fused).collect();
        let mut user = zero;
        for (m, g) in fused.iter().enumerate() {
            let row: Vec<S> = fused.iter().map(|h| dot(g, h).scale(1.0 / self.tau)).collect();
            user = user + logsumexp(&row) - row[m];
        }
        user = user.scale(1.0 / fused.len() as f64);
        let mut align = zero;
        if let Some(text) = &self.item_text {
            let enc = self.encoder(p, Encoder::Action);
            let (mut cos_term, mut bpr) = (zero, zero);
            for t in batch {
                let qp = enc.apply(&lift::<S>(&text[t.pos]));
                let qn = enc.apply(&lift::<S>(&text[t.neg]));
                let target: Vec<S> = match frozen {
                    Some(f) => lift(&f[t.pos]),
                    None => items[t.pos].iter().map(|x| x.detach()).collect(),
                };
                let c = cosine(&qp, &target).ok_or(RewardModelError::DegenerateEmbedding)?;
                cos_term = cos_term + S::cst(1.0) - c;
                let f = &branches[&t.user].fused;
                bpr = bpr + (dot(f, &qn) - dot(f, &qp)).softplus();
            }
            align = (cos_term + bpr).scale(inv_b);
        }
        let rec = rec.scale(inv_b);
        let int = int.scale(inv_b);
        let conf = conf.scale(inv_b);
        let orth = orth.scale(inv_b);
        let reg = reg.scale(0.5 * inv_b);
        let w = self.weights;
        let total = rec
            + int.scale(w.int)
            + conf.scale(w.conf)
            + orth.scale(w.orth)
            + user.scale(w.user)
            + reg.scale(w.reg)
            + align.scale(w.align);
        Ok(Stage2Loss {
            rec,
            int,
            conf,
            orth,
            user,
            reg,
            align,
            total,
        })
    }

    pub fn stage2_loss(&self, batch: &[Triplet]) -> Result<Stage2Loss<f64>> {
        self.stage2_with(&self.params, batch)
    }

    /// Value and gradient of one named term (see [`STAGE2_TERMS`]).
    pub fn stage2_gradient(&self, batch: &[Triplet], term: &str) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        let mut err = None;
        let out = gradient(&self.params, |p| match self.stage2_with(p, batch) {
            Ok(l) => pick(&l, term),
            Err(e) => {
                err = Some(e);
                Var::cst(f64::NAN)
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    /// Central-difference check of every loss term's gradient. Stop-gradient
    /// targets stay at their values for the unperturbed parameters.
    pub fn gradient_check(&self, batch: &[Triplet], h: f64, rtol: f64) -> Result<Vec<(String, GradCheckReport)>> {
        let (_, frozen) = self.propagate();
        let mut out = Vec::new();
        for term in STAGE2_TERMS {
            let (_, analytic) = self.stage2_gradient(batch, term)?;
            let mut probe = self.clone();
            let report = gradcheck::check(&self.params, &analytic, h, rtol, |x| {
                probe.params.copy_from_slice(x);
                probe
                    .stage2_impl(&probe.params, batch, Some(&frozen))
                    .map(|l| pick(&l, term))
                    .unwrap_or(f64::NAN)
            });
            out.push((term.to_string(), report));
        }
        Ok(out)
    }

    /// Swap the interest and conformity encoders.
    pub fn swap_branches(&mut self) {
        let a = self.encoder_offset(Encoder::Interest);
        let b = self.encoder_offset(Encoder::Conformity);
        let n = Self::encoder_block(self.dim);
        for k in 0..n {
            self.params.swap(a + k, b + k);
        }
    }
}

/// Draws `(user, positive, negative)` triplets; a negative is any item the
/// user has not interacted with.
pub struct TripletSampler {
    positives: Vec<(usize, usize)>,
    seen: HashSet<(usize, usize)>,
    n_items: usize,
}

impl TripletSampler {
    pub fn new(n_items: usize, interactions: &[Interaction]) -> Self {
        let seen: HashSet<(usize, usize)> = interactions.iter().map(|i| (i.user, i.item)).collect();
        let mut positives: Vec<(usize, usize)> = seen.iter().copied().collect();
        positives.sort_unstable();
        Self {
            positives,
            seen,
            n_items,
        }
    }

    fn negative<R: Rng>(&self, user: usize, rng: &mut R) -> Option<usize> {
        let free: Vec<usize> = (0..self.n_items).filter(|&j| !self.seen.contains(&(user, j))).collect();
        if free.is_empty() {
            None
        } else {
            Some(free[rng.random_range(0..free.len())])
        }
    }

    /// One triplet per observed positive, in a fixed order.
    pub fn all<R: Rng>(&self, rng: &mut R) -> Result<Vec<Triplet>> {
        let out: Vec<Triplet> = self
            .positives
            .iter()
            .filter_map(|&(user, pos)| self.negative(user, rng).map(|neg| Triplet { user, pos, neg }))
            .collect();
        if out.is_empty() {
            return Err(RewardModelError::EmptyNegatives);
        }
        Ok(out)
    }

    pub fn sample<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Vec<Triplet>> {
        let mut out = Vec::with_capacity(size);
        for _ in 0..size.max(1) * 4 {
            if out.len() == size {
                break;
            }
            let (user, pos) = self.positives[rng.random_range(0..self.positives.len())];
            if let Some(neg) = self.negative(user, rng) {
                out.push(Triplet { user, pos, neg });
            }
        }
        if out.is_empty() {
            return Err(RewardModelError::EmptyNegatives);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2TrainConfig {
    pub steps: usize,
    pub step_size: f64,
    /// Triplets per step; 0 means every observed positive with fixed negatives.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for Stage2TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            step_size: 0.05,
            batch_size: 0,
            seed: 0,
        }
    }
}

/// Loss breakdown on a fixed evaluation batch before training and after every step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainTrace {
    pub history: Vec<Stage2Loss<f64>>,
}

impl TrainTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.history.iter().map(|l| l.total).collect()
    }
}

/// Plain gradient descent on the stage-2 objective.
pub fn train_stage2(model: &mut CfModel, interactions: &[Interaction], cfg: &Stage2TrainConfig) -> Result<TrainTrace> {
    if !(cfg.step_size >= 0.0) {
        return Err(RewardModelError::InvalidConfig("step_size must be non-negative".into()));
    }
    let sampler = TripletSampler::new(model.n_items, interactions);
    if sampler.positives.is_empty() {
        return Err(RewardModelError::EmptyNegatives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = sampler.all(&mut rng)?;
    let mut history = Vec::with_capacity(cfg.steps + 1);
    history.push(model.stage2_loss(&eval)?);
    for step in 0..cfg.steps {
        let batch = if cfg.batch_size == 0 {
            eval.clone()
        } else {
            sampler.sample(cfg.batch_size, &mut rng)?
        };
        let (loss, grad) = model.stage2_gradient(&batch, "total")?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(RewardModelError::Diverged { step, loss });
        }
        for (w, g) in model.params.iter_mut().zip(&grad) {
            *w -= cfg.step_size * g;
        }
        let after = model.stage2_loss(&eval)?;
        if !after.total.is_finite() {
            return Err(RewardModelError::Diverged { step, loss: after.total });
        }
        history.push(after);
    }
    Ok(TrainTrace { history })
}

/// Unit user branch embeddings computed once for read-only scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding {
    pub int_hat: Vec<f64>,
    pub conf_hat: Vec<f64>,
    pub fused: Vec<f64>,
    pub alpha: [f64; 2],
}

impl CfModel {
    pub fn user_embeddings(&self) -> Result<Vec<UserEmbedding>> {
        let (users, _) = self.propagate();
        users
            .iter()
            .map(|u| {
                let b = self.branches_with(&self.params, u)?;
                Ok(UserEmbedding {
                    int_hat: values(&b.int_hat),
                    conf_hat: values(&b.conf_hat),
                    fused: values(&b.fused),
                    alpha: b.alpha,
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(weights: LossWeights) -> (CfModel, Vec<Interaction>) {
        let inter: Vec<Interaction> = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 2), (2, 3), (3, 0), (3, 3), (0, 2)]
            .iter()
            .map(|&(user, item)| Interaction { user, item, weight: 1.0 })
            .collect();
        let cfg = CfConfig {
            dim: 4,
            layers: 1,
            tau: 0.5,
            weights,
            ..Default::default()
        };
        (CfModel::new(4, 4, &inter, &cfg, 3).unwrap(), inter)
    }

    #[test]
    fn single_edge_propagation() {
        let inter = [Interaction { user: 0, item: 0, weight: 2.0 }];
        let cfg = CfConfig {
            dim: 3,
            layers: 1,
            ..Default::default()
        };
        let m = CfModel::new(1, 1, &inter, &cfg, 1).unwrap();
        let (u, i) = m.propagate();
        for k in 0..3 {
            let expect = (m.params[k] + m.params[3 + k]) / 2.0;
            assert!((u[0][k] - expect).abs() < 1e-15);
            assert!((i[0][k] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_layers_and_identity_are_fixed_points() {
        let (mut m, _) = toy(LossWeights::default());
        m.layers = 0;
        let (u, _) = m.propagate();
        assert_eq!(u[2], m.params[8..12].to_vec());
        m.layers = 5;
        m.adjacency = Adjacency::identity(8);
        let (u, i) = m.propagate();
        assert!(u[1].iter().zip(&m.params[4..8]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(i[3].iter().zip(&m.params[28..32]).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn popularity_range() {
        let inter = [
            Interaction { user: 0, item: 0, weight: 1.0 },
            Interaction { user: 1, item: 0, weight: 1.0 },
            Interaction { user: 1, item: 1, weight: 1.0 },
        ];
        assert_eq!(popularity(3, &inter), vec![1.0, 0.5, 0.0]);
        assert_eq!(popularity(2, &inter[..0]), vec![0.0, 0.0]);
    }

    #[test]
    fn breakdown_sums_to_total() {
        let (m, inter) = toy(LossWeights::default());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let batch = TripletSampler::new(4, &inter).all(&mut rng).unwrap();
        let l = m.stage2_loss(&batch).unwrap();
        assert!((l.weighted_sum(&m.weights) - l.total).abs() < 1e-9);
        assert_eq!(l.align, 0.0);
    }

    #[test]
    fn equal_scores_give_log_two() {
        let (m, _) = toy(LossWeights::rec_only());
        // Same item as positive and negative.
        let l = m.stage2_loss(&[Triplet { user: 0, pos: 1, neg: 1 }]).unwrap();
        assert!((l.rec - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn infonce_two_class_closed_form() {
        let u = [2.0, 0.0];
        let pos = [1.5, 0.0];
        let neg = [0.0, 3.0];
        let v = popularity_infonce(&u, &pos, &[&pos, &neg], 1.0f64.exp(), 1.0);
        let expect = -(1f64.exp() + WEIGHT_EPS).ln() + (-3.0f64).softplus();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_rejected() {
        let (m, _) = toy(LossWeights::default());
        assert!(matches!(m.stage2_loss(&[]), Err(RewardModelError::EmptyNegatives)));
        assert!(matches!(m.branch_losses(&[(0, 0)], &[]), Err(RewardModelError::EmptyNegatives)));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (m, inter) = toy(LossWeights::default());
        let text: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64 * 0.3, -0.2, 0.5 - i as f64 * 0.1]).collect();
        let m = m.with_item_text(text).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = TripletSampler::new(4, &inter).all(&mut rng).unwrap();
        for (term, r) in m.gradient_check(&batch, 1e-5, 1e-4).unwrap() {
            assert!(r.passed, "{term}: {r:?}");
        }
    }
}
