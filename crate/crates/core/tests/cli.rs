use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use echo_core::diagnostics::list_tree_dumps;
use echo_core::rollout::RolloutTree;

const BIN: &str = env!("CARGO_BIN_EXE_echo");

fn echo(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("ECHO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--override", "steps=2", "--override", "G=8", "--override", "M=4"];

fn run(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--out", path(out)];
    args.extend_from_slice(&SMALL);
    args.extend_from_slice(extra);
    echo(&args)
}

#[test]
fn run_populates_directory() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&out, &["--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics.csv").is_file());
    assert!(out.join("trees").is_dir());
    let cfg = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(cfg.contains("seed=7"));
    assert!(cfg.contains("G=8"));
}

#[test]
fn config_file_is_read() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    fs::write(&cfg, "# tiny\nsteps=1\nG=4\nM=2\nseed=3\n").unwrap();
    let out = dir.path().join("run");
    let o = echo(&["run", "--config", path(&cfg), "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let snap = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(snap.contains("G=4") && snap.contains("seed=3"));
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["default.cfg", "corridor.cfg"] {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let cfg = root.join(name);
        let o = echo(&["run", "--config", path(&cfg), "--out", path(&out), "--override", "steps=0"]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
    }
}

#[test]
fn unknown_keys_are_named_with_usage_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&out, &["--override", "tau_prnue=0.3", "--override", "B_max=zero"]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("tau_prnue"), "{err}");
    assert!(err.contains("B_max"), "{err}");
    assert!(!out.join("metrics.csv").exists());
}

#[test]
fn schedule_mode_flag_reaches_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(&out, &["--schedule-mode", "entropy_only"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let cfg = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(cfg.contains("schedule_mode=entropy_only"));
    let bad = run(&dir.path().join("other"), &["--schedule-mode", "sideways"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn output_dir_falls_back_to_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from_env");
    let mut args = vec!["run"];
    args.extend_from_slice(&SMALL);
    let o = Command::new(BIN)
        .args(&args)
        .env("ECHO_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("metrics.csv").is_file());
    // and with neither it is a usage error
    assert_eq!(echo(&["run"]).status.code(), Some(1));
}

#[test]
fn rerun_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run(&out, &[]).status.success());
    let o = run(&out, &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force") || stderr(&o).contains("not empty"), "{}", stderr(&o));
    assert!(run(&out, &["--force"]).status.success());
}

#[test]
fn gradcheck_passes_and_fails_on_impossible_tolerance() {
    let o = echo(&["gradcheck"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS"));
    assert!(stdout(&o).contains("excluded="));
    let o = echo(&["gradcheck", "--kl-coef", "0"]);
    assert!(o.status.success());
    let o = echo(&["gradcheck", "--tolerance", "1e-12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).starts_with("FAIL"));
}

#[test]
fn diagnose_chain_run_with_few_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("chain");
    let o = echo(&[
        "run", "--out", path(&out), "--schedule-mode", "chain",
        "--override", "steps=1", "--override", "G=3", "--override", "M=3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv_path = dir.path().join("diag.csv");
    let o = echo(&["diagnose", path(&out), "--out", path(&csv_path)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&csv_path).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "top3_share").unwrap();
    let rows: Vec<&str> = lines.collect();
    let dumps = list_tree_dumps(&out).unwrap();
    assert_eq!(rows.len(), dumps.len());
    let mut small = 0;
    for (row, (_, _, dump)) in rows.iter().zip(&dumps) {
        let share: f64 = row.split(',').nth(col).unwrap().parse().unwrap();
        let tree = RolloutTree::from_jsonl(&fs::read_to_string(dump).unwrap()).unwrap();
        let leaves = tree.nodes.iter().filter(|n| n.is_leaf()).count();
        // truncated chains hold budget too, so only trees with at most three leaves are exact
        if leaves <= 3 {
            assert_eq!(share, 1.0, "{row}");
            small += 1;
        } else {
            assert!(share > 0.0 && share < 1.0, "{row}");
        }
    }
    assert!(small > 0);
}

#[test]
fn compare_identical_runs_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(run(&out, &[]).status.success());
    let o = echo(&["compare", path(&out), path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let mut lines = text.lines();
    lines.next();
    let mut n = 0;
    for row in lines {
        n += 1;
        for v in row.split(',').skip(1) {
            assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{row}");
        }
    }
    assert!(n > 0);
}

#[test]
fn compare_corridor_modes_gives_nonzero_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/corridor.cfg");
    let hyb = dir.path().join("hyb");
    let ent = dir.path().join("ent");
    let base = ["run", "--config", path(&cfg), "--override", "steps=2"];
    let mut a = base.to_vec();
    a.extend_from_slice(&["--out", path(&hyb)]);
    let mut b = base.to_vec();
    b.extend_from_slice(&["--out", path(&ent), "--schedule-mode", "entropy_only"]);
    assert!(echo(&a).status.success());
    assert!(echo(&b).status.success());
    let o = echo(&["compare", path(&ent), path(&hyb)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let nonzero = text
        .lines()
        .skip(1)
        .filter(|row| row.split(',').skip(1).any(|v| v.parse::<f64>().unwrap() != 0.0))
        .count();
    assert!(nonzero > 0, "{text}");
}

#[test]
fn missing_tree_dumps_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = echo(&["diagnose", path(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("trees"), "{}", stderr(&o));
}

#[test]
fn vote_sim_reports_exact_and_simulated() {
    let o = echo(&["vote-sim", "--probs", "0.5,0.3,0.2", "-g", "16", "--trials", "2000"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("answer,prob,simulated_win,exact_win"));
    assert_eq!(text.lines().count(), 5);
    let o = echo(&["vote-sim", "--probs", "0.5,0.3"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(echo(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(echo(&[]).status.code(), Some(1));
    assert_eq!(echo(&["--help"]).status.code(), Some(0));
}
