use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seeds = [1]

[train]
episodes = 3
episode_length = 8

[oracle]
grid = 3
rollouts = 2

[evaluation]
episodes = 3
trajectories = 1

[baseline]
horizon = 3
"#;

fn mpcrl(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_mpcrl")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn bounds_match_closed_form() {
    // 2/0.1 (ln 100 + 2) = 132.1
    let out = stdout(&mpcrl(&["bounds", "--epsilon", "0.1", "--beta", "0.01", "--n-actions", "2"]));
    assert!(out.contains("convex: M = 133"), "{out}");
    assert!(out.contains("needs --zeta"));
    // risk spread over 10 steps, horizon 3
    let out = stdout(&mpcrl(&["bounds", "--epsilon", "0.1", "--beta", "0.01", "--steps", "10", "--horizon", "3", "--n-actions", "2", "--zeta", "0.1"]));
    assert!(out.contains("xi = 0.01"), "{out}");
    let expected = (2.0 / 0.01 * (100f64.ln() + 6.0)).ceil();
    assert!(out.contains(&format!("convex: M = {expected}")), "{out}");
}

#[test]
fn rejects_unknown_config_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepisodez = 3\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_mpcrl"))
        .args(["invariant-set", "--config", path(&cfg), "--out", path(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn invariant_set_writes_polytope() {
    let dir = tempfile::tempdir().unwrap();
    let out = stdout(&mpcrl(&["invariant-set", "--out", path(dir.path())]));
    assert!(out.contains("converged: true"), "{out}");
    assert!(dir.path().join("invariant_set.csv").exists());
    assert!(dir.path().join("manifest.toml").exists());
}

#[test]
fn train_evaluate_compare_rerun() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, SMALL).unwrap();
    let train = dir.path().join("train");
    let eval = dir.path().join("eval");

    mpcrl(&["train", "--config", path(&cfg), "--out", path(&train)]);
    let ck = train.join("checkpoint_seed1.txt");
    assert!(ck.exists());
    mpcrl(&["evaluate", "--checkpoint", path(&ck), "--config", path(&cfg), "--out", path(&eval)]);
    let again = dir.path().join("again");
    let out = stdout(&mpcrl(&["rerun", "--manifest", path(&eval.join("manifest.toml")), "--out", path(&again)]));
    assert!(out.contains("all outputs reproduced"), "{out}");

    let out = stdout(&mpcrl(&["compare", "--in", path(&eval)]));
    assert!(out.contains("solve time ratio"));
    assert!(eval.join("comparison.csv").exists());
    assert!(!stdout(&mpcrl(&["plot", "--in", path(&eval)])).is_empty());
}
