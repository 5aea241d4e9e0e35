//! Python bindings: anchors and advantage estimators, the personalization
//! gap, synthetic worlds with training and comparison, and skill graphs.

use parpo_core::advantage::{
    compute_grpo_advantages, compute_noanchor_advantages, compute_parpo_advantages, AdvantageConfig, AnchorStore,
    Estimator, TrajectoryRecord,
};
use parpo_core::bias_oracle::{personalization_gap as gap, PreferencePair};
use parpo_core::sim_env::{self, CompareConfig, EnvConfig, PolicyTable, TrainConfig};
use parpo_core::skill_graph::io::ingest_records;
use parpo_core::skill_graph::{self, GraphEdge, GraphNode, RetrievalConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn estimator(name: &str) -> PyResult<Estimator> {
    Estimator::ALL
        .into_iter()
        .find(|e| e.as_str() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown optimizer {name:?}; expected parpo, grpo or noanchor")))
}

/// Per-user EMA reward statistics.
#[pyclass(name = "AnchorStore")]
struct PyAnchorStore {
    inner: AnchorStore,
}

#[pymethods]
impl PyAnchorStore {
    #[new]
    #[pyo3(signature = (decay = 0.9, margin_coeff = 1.0))]
    fn new(decay: f64, margin_coeff: f64) -> PyResult<Self> {
        Ok(Self {
            inner: AnchorStore::new(decay, margin_coeff).map_err(err)?,
        })
    }

    /// Fold a batch of personalized rewards in; returns (mean, variance, count).
    fn update(&mut self, user_id: &str, batch: Vec<f64>) -> PyResult<(f64, f64, u64)> {
        let a = self.inner.update(user_id, &batch).map_err(err)?;
        Ok((a.mean, a.variance, a.count))
    }

    fn get(&self, user_id: &str) -> Option<(f64, f64, u64)> {
        self.inner.get(user_id).map(|a| (a.mean, a.variance, a.count))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn dumps(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.write_to(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }

    #[staticmethod]
    fn loads(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: AnchorStore::read_from(text.as_bytes()).map_err(err)?,
        })
    }
}

/// Advantages for one group of trajectories. `users[i]` owns record `i`.
#[pyfunction]
#[pyo3(signature = (optimizer, users, base, pers, anchors = None, w_base = 0.5, w_pers = 0.5, epsilon = 1e-8, alpha = 0.5))]
#[allow(clippy::too_many_arguments)]
fn compute_advantages(
    optimizer: &str,
    users: Vec<String>,
    base: Vec<f64>,
    pers: Vec<f64>,
    anchors: Option<&PyAnchorStore>,
    w_base: f64,
    w_pers: f64,
    epsilon: f64,
    alpha: f64,
) -> PyResult<Vec<f64>> {
    if users.len() != base.len() || base.len() != pers.len() {
        return Err(PyValueError::new_err("users, base and pers must have equal length"));
    }
    let records: Vec<TrajectoryRecord> = users
        .iter()
        .zip(base.iter().zip(&pers))
        .enumerate()
        .map(|(i, (u, (&b, &p)))| TrajectoryRecord::new(format!("t{i}"), u.clone(), "g", b, p))
        .collect();
    let cfg = AdvantageConfig {
        w_base,
        w_pers,
        epsilon,
        ..Default::default()
    };
    match estimator(optimizer)? {
        Estimator::Grpo => compute_grpo_advantages(&records, epsilon, |r| r.total_reward(alpha)),
        Estimator::NoAnchor => compute_noanchor_advantages(&records, &cfg),
        Estimator::Parpo => {
            let empty = AnchorStore::new(0.9, 1.0).map_err(err)?;
            let store = anchors.map_or(&empty, |a| &a.inner);
            compute_parpo_advantages(&records, store, &cfg)
        }
    }
    .map_err(err)
}

/// (V_pers, V_avg, gap) for per-user preference probabilities `z`.
#[pyfunction]
fn personalization_gap(z: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let g = gap(&PreferencePair::new(z).map_err(err)?).map_err(err)?;
    Ok((g.v_pers, g.v_avg, g.delta))
}

/// A synthetic population with its candidate rewards.
#[pyclass(name = "World")]
struct PyWorld {
    inner: sim_env::World,
}

#[pymethods]
impl PyWorld {
    #[staticmethod]
    #[pyo3(signature = (heterogeneity_level = None, population_size = None, query_count = None, candidate_count = None, noise_std = None, alpha_mix = None, seed = 0))]
    fn generate(
        heterogeneity_level: Option<f64>,
        population_size: Option<usize>,
        query_count: Option<usize>,
        candidate_count: Option<usize>,
        noise_std: Option<f64>,
        alpha_mix: Option<f64>,
        seed: u64,
    ) -> PyResult<Self> {
        let d = EnvConfig::default();
        let cfg = EnvConfig {
            heterogeneity_level: heterogeneity_level.unwrap_or(d.heterogeneity_level),
            population_size: population_size.unwrap_or(d.population_size),
            query_count: query_count.unwrap_or(d.query_count),
            candidate_count: candidate_count.unwrap_or(d.candidate_count),
            noise_std: noise_std.unwrap_or(d.noise_std),
            alpha_mix: alpha_mix.unwrap_or(d.alpha_mix),
            seed,
            ..d
        };
        Ok(Self {
            inner: sim_env::World::generate(&cfg).map_err(err)?,
        })
    }

    /// Two users with opposite preferences over two candidates.
    #[staticmethod]
    #[pyo3(signature = (noise_std = 0.1))]
    fn opposed_pair(noise_std: f64) -> Self {
        Self {
            inner: sim_env::World::opposed_pair(noise_std),
        }
    }

    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_queries(&self) -> usize {
        self.inner.n_queries()
    }

    /// Noiseless personalized rewards, indexed [user][query][candidate].
    #[getter]
    fn pers(&self) -> Vec<Vec<Vec<f64>>> {
        self.inner.pers.clone()
    }

    fn preference_probability(&self, user: usize, query: usize) -> PyResult<f64> {
        if user >= self.inner.n_users() || query >= self.inner.n_queries() {
            return Err(PyValueError::new_err("user or query out of range"));
        }
        Ok(self.inner.preference_probability(user, query))
    }

    /// The ground-truth reward table as tab-separated text.
    fn ground_truth_tsv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        self.inner.ground_truth().map_err(err)?.write_to(&mut buf).map_err(err)?;
        String::from_utf8(buf).map_err(err)
    }

    /// Train a policy; returns final rewards, the trace rows and the final
    /// per-user action probabilities [user][query][candidate].
    #[pyo3(signature = (optimizer = "parpo", steps = 300, seed = 0, shared_policy = false))]
    fn train<'py>(
        &self,
        py: Python<'py>,
        optimizer: &str,
        steps: usize,
        seed: u64,
        shared_policy: bool,
    ) -> PyResult<Bound<'py, PyDict>> {
        let cfg = TrainConfig {
            optimizer: estimator(optimizer)?,
            steps,
            seed,
            ..Default::default()
        };
        let w = &self.inner;
        let mut policy = PolicyTable::uniform(w, shared_policy);
        let mut anchors = cfg.anchor_store().map_err(err)?;
        let r = sim_env::train(w, &mut policy, &mut anchors, &cfg).map_err(err)?;
        let probs: Vec<Vec<Vec<f64>>> = (0..w.n_users())
            .map(|u| (0..w.n_queries()).map(|q| policy.probs(u, q)).collect())
            .collect();
        let trace: Vec<(usize, f64, f64, f64)> = r
            .trace
            .iter()
            .map(|t| (t.step, t.mean_reward, t.mean_pers_reward, t.adv_error))
            .collect();
        let d = PyDict::new(py);
        d.set_item("final_pers_reward", r.final_pers_reward)?;
        d.set_item("final_total_reward", r.final_total_reward)?;
        d.set_item("trace", trace)?;
        d.set_item("probs", probs)?;
        Ok(d)
    }
}

/// Matched-seed comparison of the three estimators.
#[pyfunction]
#[pyo3(signature = (heterogeneity_level = 1.0, trials = 20, seed = 0))]
fn compare(py: Python<'_>, heterogeneity_level: f64, trials: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let env = EnvConfig {
        heterogeneity_level,
        seed,
        ..Default::default()
    };
    let cfg = CompareConfig {
        trials,
        ..Default::default()
    };
    let r = sim_env::compare_optimizers(&env, &TrainConfig::default(), &cfg).map_err(err)?;
    let by_name = |m: &std::collections::BTreeMap<Estimator, f64>| -> PyResult<Bound<'_, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in m {
            d.set_item(k.as_str(), *v)?;
        }
        Ok(d)
    };
    let d = PyDict::new(py);
    d.set_item("parpo_error_wins", r.parpo_error_wins)?;
    d.set_item("ordering_holds", r.ordering_holds)?;
    d.set_item("mean_adv_error", by_name(&r.mean_adv_error)?)?;
    d.set_item("mean_final_pers_reward", by_name(&r.mean_final_pers_reward)?)?;
    Ok(d)
}

#[pyclass(name = "SkillGraph")]
struct PySkillGraph {
    inner: skill_graph::SkillGraph,
}

#[pymethods]
impl PySkillGraph {
    #[new]
    fn new() -> Self {
        Self {
            inner: skill_graph::SkillGraph::new(),
        }
    }

    /// Apply `node`, `embedding` and `edge` records.
    fn ingest(&mut self, records: &str) -> PyResult<()> {
        ingest_records(&mut self.inner, records).map_err(err)
    }

    #[pyo3(signature = (node_id, kind, embedding = None))]
    fn add_node(&mut self, node_id: &str, kind: &str, embedding: Option<Vec<f64>>) -> PyResult<u64> {
        let mut n = GraphNode::new(node_id, kind.parse().map_err(err)?);
        if let Some(e) = embedding {
            n = n.with_embedding(e);
        }
        self.inner.upsert_node(n).map_err(err)
    }

    fn add_edge(&mut self, src: &str, dst: &str, kind: &str, weight: f64) -> PyResult<u64> {
        let e = GraphEdge::new(src, dst, kind.parse().map_err(err)?, weight);
        self.inner.upsert_edge(e).map_err(err)
    }

    /// Ranked skills as dicts with the score and each factor.
    #[pyo3(signature = (query, user, top_m = 10, top_k = 5))]
    fn retrieve<'py>(
        &self,
        py: Python<'py>,
        query: Vec<f64>,
        user: &str,
        top_m: usize,
        top_k: usize,
    ) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let cfg = RetrievalConfig {
            top_m,
            top_k,
            ..Default::default()
        };
        self.inner
            .retrieve(&query, user, &cfg)
            .map_err(err)?
            .into_iter()
            .map(|b| {
                let d = PyDict::new(py);
                d.set_item("skill", b.skill)?;
                for (k, v) in [
                    ("score", b.score),
                    ("f_sem", b.f_sem),
                    ("f_user", b.f_user),
                    ("f_comm", b.f_comm),
                    ("f_comp", b.f_comp),
                    ("f_conf", b.f_conf),
                ] {
                    d.set_item(k, v)?;
                }
                Ok(d)
            })
            .collect()
    }

    /// (community count, modularity) per hierarchy level, finest first.
    fn communities(&self) -> Vec<(usize, f64)> {
        let c = self.inner.communities();
        c.modularity.iter().enumerate().map(|(l, q)| (c.community_count(l), *q)).collect()
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: skill_graph::SkillGraph::read_json(text.as_bytes()).map_err(err)?,
        })
    }
}

#[pymodule]
fn parpo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAnchorStore>()?;
    m.add_class::<PyWorld>()?;
    m.add_class::<PySkillGraph>()?;
    m.add_function(wrap_pyfunction!(compute_advantages, m)?)?;
    m.add_function(wrap_pyfunction!(personalization_gap, m)?)?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    Ok(())
}
