use std::fs;
use std::path::{Path, PathBuf};

use meadow::config::{EnvConfig, RunConfig, SEED_ENV};
use meadow::protocol::setup;
use meadow::safety::evaluate_constraint;
use meadow::Error;

fn shipped_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .collect();
    paths.sort();
    paths
}

const SMALL: &str = r#"
[env]
kind = "swarm"
bins = 12
steps = 6

[ensemble]
learning_rate = 1e-3

[optimizer]
learning_rate = 1e-2

[protocol]
episodes = 4
"#;

fn write(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn sets(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

// Everything touching the seed variable lives in this one test so no other test in this
// binary observes it.
#[test]
fn shipped_configs_load_and_seed_variable_wins() {
    std::env::remove_var(SEED_ENV);
    let paths = shipped_configs();
    assert!(paths.len() >= 3, "{paths:?}");
    for path in &paths {
        let config = RunConfig::load(path, &[]).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let s = setup(&config).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(evaluate_constraint(&s.spec, &s.mu0).unwrap() >= 0.0);
        assert_eq!(RunConfig::from_toml(&config.to_toml()).unwrap(), config);
    }

    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), SMALL);
    std::env::set_var(SEED_ENV, "42");
    let seeded = RunConfig::load(&path, &sets(&["seed=7"]));
    std::env::set_var(SEED_ENV, "forty-two");
    let garbage = RunConfig::load(&path, &[]);
    std::env::remove_var(SEED_ENV);
    assert_eq!(seeded.unwrap().protocol.seed, 42);
    assert!(matches!(garbage, Err(Error::Config(_))));
    assert_eq!(RunConfig::load(&path, &sets(&["seed=7"])).unwrap().protocol.seed, 7);
}

#[test]
fn overrides_accept_bare_and_dotted_keys() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), SMALL);
    let config = RunConfig::load(
        &path,
        &sets(&["episodes=9", "optimizer.learning_rate=0.5", "env.bins=20", "fraction=0.25"]),
    )
    .unwrap();
    assert_eq!(config.protocol.episodes, 9);
    assert_eq!(config.optimizer.learning_rate, 0.5);
    assert_eq!(config.ensemble.learning_rate, 1e-3);
    match &config.env {
        EnvConfig::Swarm(s) => assert_eq!(s.bins, 20),
        other => panic!("unexpected env {other:?}"),
    }
}

#[test]
fn bad_overrides_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), SMALL);
    for bad in ["no_such_key=1", "learning_rate=0.1", "protocol.nope=3", "episodes", "episodes=\"many\""] {
        let result = RunConfig::load(&path, &sets(&[bad]));
        assert!(matches!(result, Err(Error::Config(_))), "{bad}: {result:?}");
    }
}

#[test]
fn invalid_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = write(dir.path(), SMALL);
    for bad in ["bins=0", "steps=0", "members=0"] {
        assert!(RunConfig::load(&path, &sets(&[bad])).is_err(), "{bad}");
    }
    assert!(matches!(RunConfig::load(&dir.path().join("missing.toml"), &[]), Err(Error::Io(_))));
}
