use std::path::Path;
use std::process::{Command, Output};

fn parpo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_parpo"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    v.sort();
    v
}

const TOY_INTERACTIONS: &str = "user_id\titem_id\tweight\nu0\ti0\t1\nu0\ti1\t1\nu1\ti1\t1\nu1\ti2\t1\nu2\ti2\t1\nu2\ti3\t1\nu3\ti3\t1\nu3\ti0\t1\n";

#[test]
fn minimal_simulate_writes_three_artifacts() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.toml"), "[train]\nsteps = 10\n").unwrap();
    let o = parpo(t.path(), &["--config", "c.toml", "--out", "run", "simulate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(files(&t.path().join("run")), ["metrics.csv", "resolved_config.toml", "world.tsv"]);
    let metrics = std::fs::read_to_string(t.path().join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "step,optimizer,mean_reward,mean_pers_reward,adv_error");
    assert_eq!(metrics.lines().count(), 11);
}

#[test]
fn seed_flag_changes_and_fixes_output() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.toml"), "[train]\nsteps = 5\n").unwrap();
    let read = |d: &str| std::fs::read(t.path().join(d).join("metrics.csv")).unwrap();
    for (dir, seed) in [("a", "1"), ("b", "1"), ("c", "2")] {
        assert!(parpo(t.path(), &["--config", "c.toml", "--seed", seed, "--out", dir, "simulate"]).status.success());
    }
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn invalid_optimizer_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.toml"), "[train]\noptimizer = \"sgd\"\n").unwrap();
    let o = parpo(t.path(), &["--config", "c.toml", "--out", "run", "simulate"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("parpo") && err.contains("grpo") && err.contains("noanchor"), "{err}");
    assert!(err.contains("line 2"), "{err}");
    assert!(!t.path().join("run").exists());
}

#[test]
fn unknown_key_and_missing_config_exit_two() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.toml"), "[env]\nusers = 3\n").unwrap();
    assert_eq!(parpo(t.path(), &["--config", "c.toml", "simulate"]).status.code(), Some(2));
    assert_eq!(parpo(t.path(), &["--config", "nope.toml", "simulate"]).status.code(), Some(2));
    assert_eq!(parpo(t.path(), &["frobnicate"]).status.code(), Some(2));
}

#[test]
fn bounds_pass_and_shifted_anchors_raise_the_right_side() {
    let t = tempfile::tempdir().unwrap();
    let report = |dir: &str| -> serde_json::Value {
        serde_json::from_str(&std::fs::read_to_string(t.path().join(dir).join("bounds_report.json")).unwrap()).unwrap()
    };
    let anchor_rhs = |v: &serde_json::Value| -> Vec<f64> {
        let c = v["checks"].as_array().unwrap().iter().find(|c| c["bound"] == "anchor_error").unwrap();
        c["sides"].as_array().unwrap().iter().map(|s| s["rhs"].as_f64().unwrap()).collect()
    };
    assert!(parpo(t.path(), &["--out", "plain", "verify-bounds"]).status.success());
    let plain = report("plain");
    assert_eq!(plain["passed"], true);
    assert_eq!(plain["checks"].as_array().unwrap().len(), 4);

    std::fs::write(t.path().join("shift.toml"), "[bounds]\nanchor_shift_sigma = 10.0\n").unwrap();
    let o = parpo(t.path(), &["--config", "shift.toml", "--out", "shift", "verify-bounds"]);
    assert!(o.status.success(), "{}", stdout(&o));
    for (a, b) in anchor_rhs(&plain).iter().zip(anchor_rhs(&report("shift"))) {
        assert!(b > *a + 5.0, "{a} -> {b}");
    }
}

#[test]
fn homogeneous_world_has_zero_pooled_bias() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("c.toml"), "[env]\nheterogeneity_level = 0.0\n").unwrap();
    assert!(parpo(t.path(), &["--config", "c.toml", "--out", "run", "verify-bounds"]).status.success());
    let v: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(t.path().join("run/bounds_report.json")).unwrap()).unwrap();
    let c = v["checks"].as_array().unwrap().iter().find(|c| c["bound"] == "pooled_baseline_bias").unwrap();
    for s in c["sides"].as_array().unwrap() {
        assert!(s["lhs"].as_f64().unwrap().abs() < 1e-9 && s["rhs"].as_f64().unwrap().abs() < 1e-9, "{s}");
    }
}

#[test]
fn loaded_world_file_is_used() {
    let t = tempfile::tempdir().unwrap();
    assert!(parpo(t.path(), &["--out", "gen", "simulate"]).status.success());
    std::fs::write(t.path().join("c.toml"), "world_file = \"gen/world.tsv\"\n[train]\nsteps = 3\n").unwrap();
    assert!(parpo(t.path(), &["--config", "c.toml", "--out", "again", "simulate"]).status.success());
    assert_eq!(
        std::fs::read(t.path().join("gen/world.tsv")).unwrap(),
        std::fs::read(t.path().join("again/world.tsv")).unwrap()
    );
}

#[test]
fn graph_query_prints_fixture_score() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(
        t.path().join("r.txt"),
        "# fixture\nedge u s owns 1\nnode u user\nnode s skill\nembedding u 1 0\nembedding s 1 0\n",
    )
    .unwrap();
    assert!(parpo(t.path(), &["--out", "g", "graph", "build", "--records", "r.txt"]).status.success());
    let o = parpo(t.path(), &["graph", "query", "--graph", "g/graph.json", "--user", "u", "--query", "1,0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().nth(1).unwrap();
    assert!(row.contains(" s ") && row.contains("0.7200"), "{out}");
    assert!(out.lines().next().unwrap().contains("f_conf"));
    assert!(!out.contains("-0.0000"), "{out}");
}

#[test]
fn graph_communities_on_two_cliques() {
    let t = tempfile::tempdir().unwrap();
    let mut rec = String::new();
    for c in ["a", "b"] {
        for i in 0..4 {
            rec.push_str(&format!("node {c}{i} skill\n"));
        }
        for i in 0..4 {
            for j in i + 1..4 {
                rec.push_str(&format!("edge {c}{i} {c}{j} complement 1\n"));
            }
        }
    }
    std::fs::write(t.path().join("r.txt"), rec).unwrap();
    assert!(parpo(t.path(), &["--out", "g", "graph", "build", "--records", "r.txt"]).status.success());
    let o = parpo(t.path(), &["graph", "communities", "--graph", "g/graph.json"]);
    let out = stdout(&o);
    assert!(out.lines().any(|l| l.contains("2 communities") && l.contains("(selected)")), "{out}");
}

#[test]
fn dangling_edge_exits_two_without_output() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("r.txt"), "node a skill\nedge a ghost complement 0.5\n").unwrap();
    let o = parpo(t.path(), &["--out", "g", "graph", "build", "--records", "r.txt"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!t.path().join("g/graph.json").exists());
}

#[test]
fn train_rm_on_toy_interactions() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("i.tsv"), TOY_INTERACTIONS).unwrap();
    std::fs::write(
        t.path().join("c.toml"),
        "[reward_model]\ninteractions = \"i.tsv\"\n[reward_model.cf]\ndim = 4\n",
    )
    .unwrap();
    let o = parpo(t.path(), &["--config", "c.toml", "--out", "rm", "train-rm"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    assert_eq!(files(&t.path().join("rm")), ["loss_trace.csv", "model.txt", "resolved_config.toml"]);
    let trace = std::fs::read_to_string(t.path().join("rm/loss_trace.csv")).unwrap();
    let totals: Vec<f64> = trace.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 201);
    assert!(totals[200] < totals[0]);
}

#[test]
fn train_rm_zero_step_is_flat() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("i.tsv"), TOY_INTERACTIONS).unwrap();
    std::fs::write(
        t.path().join("c.toml"),
        "[reward_model]\ninteractions = \"i.tsv\"\nsteps = 5\nstep_size = 0.0\n",
    )
    .unwrap();
    assert!(parpo(t.path(), &["--config", "c.toml", "--out", "rm", "train-rm"]).status.success());
    let trace = std::fs::read_to_string(t.path().join("rm/loss_trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).map(|l| l.split_once(',').unwrap().1).collect();
    assert!(rows.windows(2).all(|w| w[0] == w[1]));
}

#[test]
fn corrupt_interactions_leave_no_model() {
    let t = tempfile::tempdir().unwrap();
    std::fs::write(t.path().join("i.tsv"), "user_id\titem_id\tweight\nu0\ti0\tlots\n").unwrap();
    std::fs::write(t.path().join("c.toml"), "[reward_model]\ninteractions = \"i.tsv\"\n").unwrap();
    let o = parpo(t.path(), &["--config", "c.toml", "--out", "rm", "train-rm"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    assert!(!t.path().join("rm/model.txt").exists());
}

#[test]
fn help_documents_csv_columns() {
    let t = tempfile::tempdir().unwrap();
    let o = parpo(t.path(), &["simulate", "--help"]);
    assert!(stdout(&o).contains("step, optimizer, mean_reward, mean_pers_reward, adv_error"));
    let o = parpo(t.path(), &["train-rm", "--help"]);
    assert!(stdout(&o).contains("step, rec, int, conf, orth, user, reg, align, total"));
}
