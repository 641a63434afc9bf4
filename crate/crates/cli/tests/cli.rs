use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY_SWARM: &str = r#"
[env]
kind = "swarm"
bins = 10
steps = 5
reward = "safe"

[safety]
kind = "entropy"
fraction = 0.5
l_h = 100.0
lipschitz_pairs = 10

[ensemble]
members = 2
hidden = [4]
max_epochs = 5
patience = 2

[optimizer]
hidden = [4]
learning_rate = 1e-3
max_epochs = 5
patience = 2
barrier_weight = 1.0

[protocol]
episodes = 2
agents = 2
scan_actions = 3
"#;

const TINY_REPO: &str = r#"
[env]
kind = "repositioning"
bins = 4
steps = 3

[safety]
kind = "entropy"
fraction = 0.5
l_h = 100.0
lipschitz_pairs = 10

[ensemble]
members = 2
hidden = [4]
max_epochs = 5
patience = 2

[optimizer]
hidden = [4]
max_epochs = 5
patience = 2

[protocol]
episodes = 1
agents = 2
scan_actions = 3
"#;

fn meadow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meadow"))
        .args(args)
        .env_remove("MEADOW_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn train_writes_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "swarm.toml", TINY_SWARM);
    let run = dir.path().join("run");
    let out = meadow(&["train", "--config", &cfg, "--set", "episodes=2", "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in [
        "config.snapshot",
        "episodes.csv",
        "safety.csv",
        "distributions.csv",
        "training_log.csv",
        "policy.ckpt",
        "ensemble.ckpt",
    ] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let episodes = fs::read_to_string(run.join("episodes.csv")).unwrap();
    assert_eq!(episodes.lines().count(), 3);
}

#[test]
fn infeasible_threshold_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "swarm.toml", TINY_SWARM);
    let run = dir.path().join("run");
    let out = meadow(&["train", "--config", &cfg, "--set", "safety.threshold=10.0", "--out", run.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("infeasible constraint"));
}

#[test]
fn missing_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let out = meadow(&["plan", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unknown_override_key_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "swarm.toml", TINY_SWARM);
    let out = meadow(&["plan", "--config", &cfg, "--set", "no_such_key=3", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_arguments_exit_with_one() {
    let out = meadow(&["oracle-swarm", "--k", "ten"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plan_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "swarm.toml", TINY_SWARM);
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let run = dir.path().join(name);
            let out = meadow(&["plan", "--config", &cfg, "--out", run.to_str().unwrap()]);
            assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
            (stdout(&out), fs::read(run.join("policy.ckpt")).unwrap())
        })
        .collect();
    assert_eq!(runs[0], runs[1]);
    assert!(runs[0].0.contains("known-transitions objective"));
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "swarm.toml", TINY_SWARM);
    let run = dir.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_meadow"))
        .args(["plan", "--config", &cfg, "--out", run.to_str().unwrap()])
        .env("MEADOW_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success());
    let snapshot = fs::read_to_string(run.join("config.snapshot")).unwrap();
    assert!(snapshot.contains("seed = 42"), "{snapshot}");
}

#[test]
fn oracle_reports_stationary_solution() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("oracle.csv");
    let out = meadow(&["oracle-swarm", "--k", "100", "--dt", "0.01", "--out", csv.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    let value = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(key)).unwrap();
        line[key.len()..].trim().parse().unwrap()
    };
    assert!((value("action at 0") - 2.0 * std::f64::consts::PI).abs() < 1e-12);
    assert!((value("total mass") - 1.0).abs() < 1e-12);
    assert!(value("stationarity residual") <= 0.02);
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 101);
}

#[test]
fn oracle_rejects_step_that_does_not_divide_time() {
    let out = meadow(&["oracle-swarm", "--k", "10", "--dt", "0.3"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_finite_sweep_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "swarm.toml", TINY_SWARM);
    let run = dir.path().join("run");
    assert!(meadow(&["plan", "--config", &cfg, "--out", run.to_str().unwrap()]).status.success());
    let policy = run.join("policy.ckpt");
    let sweep = |name: &str, jobs: &str| {
        let path = dir.path().join(name);
        let out = meadow(&[
            "eval-finite",
            "--config",
            &cfg,
            "--policy",
            policy.to_str().unwrap(),
            "--m",
            "1,50",
            "--seeds",
            "3",
            "--jobs",
            jobs,
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        fs::read_to_string(path).unwrap()
    };
    let first = sweep("a.csv", "1");
    assert_eq!(first, sweep("b.csv", "2"));
    let mut lines = first.lines();
    assert_eq!(lines.next(), Some("agents,seed_index,objective,mean_field_objective,abs_gap,min_h_value"));
    assert_eq!(lines.count(), 6);
}

#[test]
fn export_writes_environment_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "repo.toml", TINY_REPO);
    let out_dir = dir.path().join("export");
    let out = meadow(&["export", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["mu0.csv", "demand.csv", "trips.csv"] {
        assert!(out_dir.join(file).exists(), "missing {file}");
    }
    let demand = fs::read_to_string(out_dir.join("demand.csv")).unwrap();
    assert_eq!(demand.lines().count(), 17);
}
