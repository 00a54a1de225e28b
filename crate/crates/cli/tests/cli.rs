use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[env]
num_envs = 8
episode_len = 20

[train]
alpha = 0.25
iterations = 4
rollout_len = 8
epochs = 2
minibatches = 2
hidden = [8]
checkpoint_every = 2

[sweep]
alphas = [0.05, 0.1, 0.25, 0.5, 0.75]

[eval]
episodes = 8
num_envs = 4
alphas = [0.25, 0.5]
perturbations = ["none", "delay", "push"]

[bandit]
horizon = 40
episode_len = 10
reward_range = 30.0
window = 10

[[bandit.arms]]
family = "fixed-trace"
returns = [1.0, 2.0, 3.0]

[[bandit.arms]]
family = "fixed-trace"
returns = [2.5, 0.5]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_cvarppo"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train(root: &Path, cfg: &Path, extra: &[&str]) -> PathBuf {
    let mut args = vec!["--output-dir", s(root), "train", "--config", s(cfg)];
    args.extend_from_slice(extra);
    let o = run(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    PathBuf::from(String::from_utf8(o.stdout).unwrap().trim())
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect()
}

#[test]
fn missing_alpha_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "[train]\nepsilon = 0.2\n");
    let o = run(&["--output-dir", s(d.path()), "train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_validation_error() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "[train]\nalpha = 0.5\nalhpa = 0.1\n");
    let o = run(&["--output-dir", s(d.path()), "train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alhpa"), "{}", stderr(&o));
}

#[test]
fn invalid_value_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", "[train]\nalpha = 0.5\nepsilon = 1.5\n");
    let o = run(&["--output-dir", s(d.path()), "train", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("train.epsilon"), "{}", stderr(&o));
}

#[test]
fn train_writes_run_directory_and_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let a = train(&d.path().join("a"), &cfg, &["--alpha", "0.5"]);
    let b = train(&d.path().join("b"), &cfg, &["--alpha", "0.5"]);
    assert_eq!(a.file_name().unwrap(), "train-a0.5-s0");
    for f in ["config.toml", "metrics.csv", "manifest.toml", "timing.log"] {
        assert!(a.join(f).exists(), "{f}");
    }
    for f in ["ckpt_000002.json", "ckpt_000004.json", "final.json"] {
        assert!(a.join("checkpoints").join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(a.join("config.toml")).unwrap(), TINY);
    let ma = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(csv_rows(&a.join("metrics.csv")).len(), 4);
    let other = train(&d.path().join("c"), &cfg, &["--alpha", "0.5", "--seed", "3"]);
    assert_ne!(ma, std::fs::read(other.join("metrics.csv")).unwrap());
}

#[test]
fn existing_run_id_is_refused() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    train(d.path(), &cfg, &["--ppo"]);
    let o = run(&["--output-dir", s(d.path()), "train", "--config", s(&cfg), "--ppo"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("already exists"));
}

#[test]
fn ppo_run_keeps_lambda_at_zero() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let dir = train(d.path(), &cfg, &["--ppo"]);
    assert_eq!(dir.file_name().unwrap(), "ppo-s0");
    let mut r = csv::Reader::from_path(dir.join("metrics.csv")).unwrap();
    let col = r.headers().unwrap().iter().position(|h| h == "lambda").unwrap();
    for row in r.records() {
        assert_eq!(row.unwrap()[col].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn eval_rows_are_the_cartesian_product() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let p1 = train(d.path(), &cfg, &["--ppo"]);
    let p2 = train(d.path(), &cfg, &[]);
    let ck1 = p1.join("checkpoints/final.json");
    let ck2 = p2.join("checkpoints/final.json");
    let o = run(&[
        "--output-dir", s(d.path()), "--run-id", "e1", "eval", "--config", s(&cfg),
        "--checkpoint", s(&ck1), "--checkpoint", s(&ck2),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&d.path().join("e1/robustness.csv"));
    assert_eq!(rows.len(), 6);
    let mut r = csv::Reader::from_path(d.path().join("e1/robustness.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        header,
        ["policy", "perturbation", "episodes", "mean", "failure_rate", "mean_length", "var_0.25", "cvar_0.25", "var_0.5", "cvar_0.5"]
    );
    assert_eq!(rows[0][0], "ppo-s0");
    assert_eq!(rows[3][0], "train-a0.25-s0");
    for row in &rows {
        let var: f64 = row[6].parse().unwrap();
        let cvar: f64 = row[7].parse().unwrap();
        assert!(cvar <= var);
        assert_eq!(row[2], "8");
    }

    let o = run(&[
        "--output-dir", s(d.path()), "--run-id", "e2", "eval", "--config", s(&cfg),
        "--checkpoint", s(&ck1), "--checkpoint", s(&ck2), "--perturbation", "none",
    ]);
    assert!(o.status.success());
    assert_eq!(csv_rows(&d.path().join("e2/robustness.csv")).len(), 2);
}

#[test]
fn unknown_perturbation_lists_valid_names() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let p = train(d.path(), &cfg, &["--ppo"]);
    let o = run(&[
        "--output-dir", s(d.path()), "eval", "--config", s(&cfg),
        "--checkpoint", s(&p.join("checkpoints/final.json")), "--perturbation", "rough",
    ]);
    assert_eq!(o.status.code(), Some(1));
    let e = stderr(&o);
    assert!(e.contains("rough") && e.contains("brownian") && e.contains("incline"), "{e}");
}

#[test]
fn bandit_with_one_arm_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let text = TINY.split("[[bandit.arms]]").take(2).collect::<Vec<_>>().join("[[bandit.arms]]");
    let cfg = write_config(d.path(), "c.toml", &text);
    let o = run(&["--output-dir", s(d.path()), "bandit", "--config", s(&cfg)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least 2 arms"));
}

#[test]
fn fixed_trace_bandit_is_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    for id in ["x", "y"] {
        let o = run(&["--output-dir", s(d.path()), "--run-id", id, "--seed", "9", "bandit", "--config", s(&cfg)]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for f in ["selections.csv", "regret.csv", "selection_summary.csv"] {
        assert_eq!(
            std::fs::read(d.path().join("x").join(f)).unwrap(),
            std::fs::read(d.path().join("y").join(f)).unwrap()
        );
    }
    let rows = csv_rows(&d.path().join("x/selections.csv"));
    assert_eq!(rows.len(), 40);
    // Warm start pulls each arm once, with no scores.
    assert_eq!((rows[0][1].as_str(), rows[1][1].as_str()), ("1", "2"));
    assert_eq!(rows[0][3], "");
    assert!(rows[2][3].parse::<f64>().is_ok());
    let summary = csv_rows(&d.path().join("x/selection_summary.csv"));
    assert_eq!(summary.len(), 2);
    assert_eq!(summary[0].len(), 5);
    for w in 1..5 {
        let total: f64 = summary.iter().map(|r| r[w].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bandit_accepts_live_policy_arms() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let p = train(d.path(), &cfg, &["--ppo"]);
    let o = run(&[
        "--output-dir", s(d.path()), "--run-id", "b", "bandit", "--config", s(&cfg),
        "--checkpoint", s(&p.join("checkpoints/final.json")), "--perturbation", "delay", "--episodes", "12",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&d.path().join("b/selections.csv"));
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[2][1], "3");
    assert_eq!(rows[0].len(), 3 + 3 + 2);
}

#[test]
fn sweep_produces_six_runs_and_a_robustness_table() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let o = run(&["--output-dir", s(d.path()), "--seed", "2", "sweep", "--config", s(&cfg), "--perturbation", "none"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let root = d.path().join("sweep-s2");
    let mut runs: Vec<String> = std::fs::read_dir(&root)
        .unwrap()
        .map(|e| e.unwrap())
        .filter(|e| e.path().join("metrics.csv").exists())
        .map(|e| e.file_name().into_string().unwrap())
        .collect();
    runs.sort();
    assert_eq!(runs, ["cvar-a0.05", "cvar-a0.1", "cvar-a0.25", "cvar-a0.5", "cvar-a0.75", "ppo"]);
    let rows = csv_rows(&root.join("eval/robustness.csv"));
    assert_eq!(rows.len(), 6);
}

#[test]
fn selftest_passes() {
    let o = run(&["selftest"]);
    assert!(o.status.success());
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5);
}

#[test]
fn tampered_snapshot_blocks_replay() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let p = train(&d.path().join("a"), &cfg, &["--ppo"]);
    std::fs::write(p.join("config.toml"), TINY.replace("iterations = 4", "iterations = 5")).unwrap();
    let o = run(&["--output-dir", s(&d.path().join("b")), "replay", "--manifest", s(&p.join("manifest.toml"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("hash"));
}
