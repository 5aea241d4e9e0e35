use std::fs::File;
use std::io::BufReader;

use parpo_core::advantage::UserAnchor;
use parpo_core::bias_oracle::{
    anchor_bound_check, grpo_bias_terms, group_bound_check, personalization_gap, PreferencePair, UserRewardTable,
};
use parpo_core::reward_model::io::{write_model, InteractionData};
use parpo_core::reward_model::{train_stage2, CfModel, RewardModelError, TripletSampler};
use parpo_core::sim_env::compare::personalization_consistency;
use parpo_core::sim_env::train::write_trace_csv;
use parpo_core::sim_env::{compare_optimizers, train, warm_anchors, PolicyTable, SimError, World};
use parpo_core::skill_graph::io::ingest_records;
use parpo_core::skill_graph::{GraphError, SkillGraph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::output::Artifacts;
use crate::{Failure, GraphCommand};

fn sim_failure(e: SimError) -> Failure {
    match e {
        SimError::Diverged { .. } | SimError::Io(_) => Failure::Runtime(e.to_string()),
        _ => Failure::Usage(e.to_string()),
    }
}

fn graph_failure(e: GraphError) -> Failure {
    match e {
        GraphError::Io(_) => Failure::Runtime(e.to_string()),
        _ => Failure::Usage(e.to_string()),
    }
}

fn rm_failure(e: RewardModelError) -> Failure {
    match e {
        RewardModelError::Diverged { .. } | RewardModelError::Io(_) => Failure::Runtime(e.to_string()),
        _ => Failure::Usage(e.to_string()),
    }
}

fn open(path: &std::path::Path) -> Result<File, Failure> {
    File::open(path).map_err(|e| Failure::Usage(format!("cannot open {}: {e}", path.display())))
}

fn load_world(cfg: &RunConfig) -> Result<World, Failure> {
    match &cfg.world_file {
        Some(p) => {
            let table = UserRewardTable::read_from(open(p)?)
                .map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?;
            World::from_table(&table, cfg.env.noise_std).map_err(sim_failure)
        }
        None => World::generate(&cfg.env_config()).map_err(sim_failure),
    }
}

fn finish(mut out: Artifacts, cfg: &RunConfig) -> Result<(), Failure> {
    out.write("resolved_config.toml", cfg.to_toml()?.as_bytes())?;
    for p in out.written() {
        println!("wrote {}", p.display());
    }
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<(), Failure> {
    let world = load_world(cfg)?;
    let tcfg = cfg.train_config();
    tcfg.validate().map_err(sim_failure)?;
    let mut policy = PolicyTable::uniform(&world, cfg.train.shared_policy);
    let mut anchors = tcfg.anchor_store().map_err(sim_failure)?;
    let report = train(&world, &mut policy, &mut anchors, &tcfg).map_err(sim_failure)?;

    let mut table = Vec::new();
    world
        .ground_truth()
        .and_then(|t| t.write_to(&mut table).map_err(Into::into))
        .map_err(sim_failure)?;
    let mut metrics = Vec::new();
    write_trace_csv(&report.trace, &mut metrics).map_err(sim_failure)?;

    let mut out = Artifacts::new(&cfg.out_dir)?;
    out.write("world.tsv", &table)?;
    out.write("metrics.csv", &metrics)?;
    println!(
        "{}: final personalized reward {:.4}, total reward {:.4}",
        tcfg.optimizer, report.final_pers_reward, report.final_total_reward
    );
    finish(out, cfg)
}

pub fn compare(cfg: &RunConfig) -> Result<(), Failure> {
    let tcfg = cfg.train_config();
    let report = compare_optimizers(&cfg.env_config(), &tcfg, &cfg.compare).map_err(sim_failure)?;
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut out = Artifacts::new(&cfg.out_dir)?;
    out.write("compare_report.json", json.as_bytes())?;
    for (k, e) in &report.mean_adv_error {
        println!("{k:<9} adv_error {e:.4}  final_pers_reward {:.4}", report.mean_final_pers_reward[k]);
    }
    println!(
        "parpo error below grpo in {}/{} trials; reward ordering held in {}/{}",
        report.parpo_error_wins,
        report.trials.len(),
        report.ordering_holds,
        report.trials.len()
    );
    finish(out, cfg)
}

#[derive(Debug, Serialize)]
struct Side {
    scope: String,
    lhs: f64,
    rhs: f64,
    holds: bool,
}

#[derive(Debug, Serialize)]
struct BoundCheck {
    bound: &'static str,
    cases: usize,
    violations: usize,
    passed: bool,
    sides: Vec<Side>,
}

#[derive(Debug, Serialize)]
struct BoundsReport {
    users: usize,
    queries: usize,
    passed: bool,
    checks: Vec<BoundCheck>,
}

const GAP_TOL: f64 = 1e-12;

pub fn verify_bounds(cfg: &RunConfig) -> Result<(), Failure> {
    let world = load_world(cfg)?;
    let table = world.ground_truth().map_err(sim_failure)?;
    let eps = cfg.bounds.epsilon;
    let nq = world.n_queries();
    let nu = world.n_users();
    let oracle = |e: parpo_core::bias_oracle::OracleError| Failure::Usage(e.to_string());

    let mut checks = Vec::new();

    // Shared versus per-user policy value on the first two candidates.
    let mut sides = Vec::new();
    for q in 0..nq {
        let z: Vec<f64> = (0..nu).map(|u| world.preference_probability(u, q)).collect();
        let gap = personalization_gap(&PreferencePair::new(z).map_err(oracle)?).map_err(oracle)?;
        let lhs = if nu <= 20 {
            personalization_consistency(&world, q).map_err(sim_failure)?.0
        } else {
            gap.v_pers - gap.v_avg
        };
        sides.push(Side {
            scope: world.query_id(q),
            lhs,
            rhs: gap.delta,
            holds: (lhs - gap.delta).abs() <= GAP_TOL && gap.delta >= -GAP_TOL,
        });
    }
    checks.push(summarize("personalization_gap", nq, sides));

    // Pooled baseline: the tightest trajectory of each query.
    let mut sides = Vec::new();
    let mut cases = 0;
    let mut violations = 0;
    for q in 0..nq {
        let mut worst: Option<Side> = None;
        for u in 0..nu {
            for t in 0..world.n_candidates(q) {
                let b = grpo_bias_terms(&table, u, q, t, eps).map_err(oracle)?;
                cases += 1;
                violations += usize::from(!b.holds);
                let side = Side {
                    scope: world.query_id(q),
                    lhs: b.total_error,
                    rhs: b.baseline_term + b.scale_term,
                    holds: b.holds,
                };
                if worst.as_ref().is_none_or(|w| side.rhs - side.lhs < w.rhs - w.lhs) {
                    worst = Some(side);
                }
            }
        }
        sides.extend(worst);
    }
    checks.push(BoundCheck {
        bound: "pooled_baseline_bias",
        cases,
        violations,
        passed: violations == 0,
        sides,
    });

    let tcfg = cfg.train_config();
    tcfg.validate().map_err(sim_failure)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.bounds_seed());
    let mut anchors = warm_anchors(&world, &tcfg, cfg.bounds.warmup_batches, &mut rng).map_err(sim_failure)?;
    if cfg.bounds.anchor_shift_sigma != 0.0 {
        let shifted: Vec<(String, UserAnchor)> = anchors
            .iter()
            .map(|(id, a)| {
                let mut a = *a;
                a.mean += cfg.bounds.anchor_shift_sigma * a.std_dev();
                (id.to_string(), a)
            })
            .collect();
        for (id, a) in shifted {
            anchors.insert(id, a);
        }
    }

    let r = anchor_bound_check(&table, &anchors, None, eps).map_err(oracle)?;
    checks.push(BoundCheck {
        bound: "anchor_error",
        cases: r.cases,
        violations: r.violations,
        passed: r.passed(),
        sides: r
            .expectation
            .iter()
            .map(|e| Side {
                scope: e.query.clone(),
                lhs: e.lhs,
                rhs: e.rhs,
                holds: e.holds,
            })
            .collect(),
    });

    let groups = cfg.bounds.groups.clamp(1, nu);
    let grouping: Vec<usize> = (0..nu).map(|u| u % groups).collect();
    let r = group_bound_check(&table, &grouping, &anchors, None, eps).map_err(oracle)?;
    checks.push(BoundCheck {
        bound: "group_anchor_error",
        cases: r.cases,
        violations: r.violations,
        passed: r.passed(),
        sides: r
            .queries
            .iter()
            .map(|q| Side {
                scope: q.query.clone(),
                lhs: q.mean_error,
                rhs: q.expectation_bound,
                holds: q.expectation_holds && q.ordering_holds,
            })
            .collect(),
    });

    let report = BoundsReport {
        users: nu,
        queries: nq,
        passed: checks.iter().all(|c| c.passed),
        checks,
    };
    for c in &report.checks {
        for s in &c.sides {
            let mark = if s.holds { "pass" } else { "FAIL" };
            println!("{:<20} {:<6} lhs {:>12.6}  rhs {:>12.6}  {mark}", c.bound, s.scope, s.lhs, s.rhs);
        }
        println!("{:<20} {} cases, {} violations", c.bound, c.cases, c.violations);
    }
    let json = serde_json::to_string_pretty(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut out = Artifacts::new(&cfg.out_dir)?;
    out.write("bounds_report.json", json.as_bytes())?;
    finish(out, cfg)?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Runtime("at least one bound failed".into()))
    }
}

fn summarize(bound: &'static str, cases: usize, sides: Vec<Side>) -> BoundCheck {
    let violations = sides.iter().filter(|s| !s.holds).count();
    BoundCheck {
        bound,
        cases,
        violations,
        passed: violations == 0,
        sides,
    }
}

pub fn graph(cfg: &RunConfig, cmd: GraphCommand) -> Result<(), Failure> {
    match cmd {
        GraphCommand::Build { records, graph } => {
            let mut g = match graph {
                Some(p) => SkillGraph::read_json(BufReader::new(open(&p)?)).map_err(graph_failure)?,
                None => SkillGraph::new(),
            };
            let text = std::fs::read_to_string(&records)
                .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", records.display())))?;
            ingest_records(&mut g, &text).map_err(|e| Failure::Usage(format!("{}: {e}", records.display())))?;
            g.refresh_communities();
            let json = g.to_json().map_err(graph_failure)?;
            let mut out = Artifacts::new(&cfg.out_dir)?;
            out.write("graph.json", json.as_bytes())?;
            println!("{} nodes, {} edges", g.node_count(), g.edge_count());
            for p in out.written() {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        GraphCommand::Query { graph, user, query } => {
            let g = SkillGraph::read_json(BufReader::new(open(&graph)?)).map_err(graph_failure)?;
            let ranked = g.retrieve(&query, &user, &cfg.retrieval).map_err(graph_failure)?;
            println!("rank  skill                 score   f_sem  f_user  f_comm  f_comp  f_conf");
            for (i, b) in ranked.iter().enumerate() {
                println!(
                    "{:<5} {:<20} {:.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
                    i + 1,
                    b.skill,
                    b.score,
                    b.f_sem,
                    b.f_user,
                    b.f_comm,
                    b.f_comp,
                    b.f_conf
                );
            }
            Ok(())
        }
        GraphCommand::Communities { graph } => {
            let g = SkillGraph::read_json(BufReader::new(open(&graph)?)).map_err(graph_failure)?;
            let c = g.communities();
            for (l, q) in c.modularity.iter().enumerate() {
                let mark = if l == c.selected_level { "  (selected)" } else { "" };
                println!("level {l}: {} communities, Q = {q:.4}{mark}", c.community_count(l));
            }
            Ok(())
        }
    }
}

pub fn train_rm(cfg: &RunConfig) -> Result<(), Failure> {
    let rm = &cfg.reward_model;
    let path = rm
        .interactions
        .as_ref()
        .ok_or_else(|| Failure::Usage("reward_model.interactions is not set".into()))?;
    let data = InteractionData::read_from(open(path)?).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut model = CfModel::new(data.users.len(), data.items.len(), &data.interactions, &rm.cf, cfg.rm_init_seed())
        .map_err(rm_failure)?;

    let tcfg = cfg.rm_train_config();
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let batch = TripletSampler::new(data.items.len(), &data.interactions)
        .all(&mut rng)
        .map_err(rm_failure)?;
    let checks = model
        .gradient_check(&batch, rm.grad_check_h, rm.grad_check_rtol)
        .map_err(rm_failure)?;
    let mut failed = Vec::new();
    for (term, r) in &checks {
        let mark = if r.passed { "pass" } else { "FAIL" };
        println!("gradient check {term:<6} max rel error {:.2e}  {mark}", r.max_rel_error);
        if !r.passed {
            failed.push(term.as_str());
        }
    }
    if !failed.is_empty() {
        return Err(Failure::Runtime(format!("gradient check failed for {}", failed.join(", "))));
    }

    let trace = train_stage2(&mut model, &data.interactions, &tcfg).map_err(rm_failure)?;
    let mut csv_out = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Failure::Runtime(e.to_string());
    csv_out
        .write_record(["step", "rec", "int", "conf", "orth", "user", "reg", "align", "total"])
        .map_err(io)?;
    for (step, l) in trace.history.iter().enumerate() {
        let row = [l.rec, l.int, l.conf, l.orth, l.user, l.reg, l.align, l.total];
        let mut rec = vec![step.to_string()];
        rec.extend(row.iter().map(|x| x.to_string()));
        csv_out.write_record(&rec).map_err(io)?;
    }
    let csv_bytes = csv_out.into_inner().map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut model_bytes = Vec::new();
    write_model(&model, &mut model_bytes).map_err(rm_failure)?;

    let totals = trace.totals();
    println!(
        "total loss {:.6} -> {:.6} over {} steps",
        totals[0],
        totals[totals.len() - 1],
        totals.len() - 1
    );
    let mut out = Artifacts::new(&cfg.out_dir)?;
    out.write("model.txt", &model_bytes)?;
    out.write("loss_trace.csv", &csv_bytes)?;
    finish(out, cfg)
}
