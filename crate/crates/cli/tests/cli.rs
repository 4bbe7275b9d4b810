use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scenario(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "..", "..", "scenarios", name].iter().collect()
}

fn bikecross(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bikecross")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn balanced_run_exits_zero_and_writes_logs() {
    let dir = tempfile::tempdir().unwrap();
    let out = bikecross(&["run", s(&scenario("single.toml")), "--out", s(dir.path()), "--roa"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("balanced"));
    for f in ["state.csv", "events.csv", "legs.csv", "metrics.json", "roa.csv"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn lost_balance_exits_two() {
    let out = bikecross(&["run", s(&scenario("single.toml")), "--no-impulse"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("balance_lost"));
}

#[test]
fn errors_exit_one() {
    let out = bikecross(&["run", "no/such/scenario.toml"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(bikecross(&["run"]).status.code(), Some(1));
    assert_eq!(bikecross(&["fly", "x"]).status.code(), Some(1));
    assert_eq!(bikecross(&["--help"]).status.code(), Some(0));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "schema = 1\n[reference]\nkind = \"line\"\nspeed = 1.0\n[modes]\nimpluse = true\n").unwrap();
    let out = bikecross(&["run", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("impluse"));
}

#[test]
fn seed_flag_overrides_the_file() {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = bikecross(&["run", s(&scenario("flat.toml")), "--seed", "3", "--out", s(d.path())]);
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("state.csv")).unwrap();
    assert_eq!(read(&dirs[0]), read(&dirs[1]));
}

#[test]
fn roa_writes_a_grid() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("roa.csv");
    let out = bikecross(&["roa", s(&scenario("single.toml")), "--out", s(&file)]);
    assert_eq!(out.status.code(), Some(0));
    let text = std::fs::read_to_string(file).unwrap();
    assert!(text.lines().count() > 100);
}

#[test]
fn sweep_reports_one_row_per_value() {
    let out = bikecross(&["sweep", s(&scenario("ladder.toml")), "--param", "obstacles.0.h_o=0.02:0.04:3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.lines().skip(1).all(|l| l.contains("balanced")));
    assert_eq!(bikecross(&["sweep", s(&scenario("ladder.toml")), "--param", "h_o"]).status.code(), Some(1));
}

#[test]
fn train_residual_writes_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    std::fs::write(&cfg, "schema = 1\nexamples = 300\nseed = 2\n[train]\nepochs = 1\nhidden = 8\nhead = 8\n").unwrap();
    let model = dir.path().join("m.bkrs");
    let data = dir.path().join("d.csv");
    let out = bikecross(&["train-residual", s(&cfg), "--out", s(&model), "--dataset", s(&data)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(std::fs::metadata(&model).unwrap().len() > 0);
    assert_eq!(std::fs::read_to_string(&data).unwrap().lines().count(), 301);
}
