use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn rpo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rpo")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rpo(args);
    assert!(
        out.status.success(),
        "rpo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: [&str; 8] = [
    "--set",
    "trainer.iterations=3",
    "--set",
    "trainer.horizon=4",
    "--set",
    "trainer.actor_hidden=[8]",
    "--set",
    "trainer.critic_hidden=[8]",
];

fn tiny(cmd: &str, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![cmd.into(), "--out".into(), out.display().to_string(), "--quiet".into()];
    v.extend(TINY.iter().map(|s| s.to_string()));
    v.extend(["--set".into(), "eval.episodes=4".into(), "--set".into(), "env.num_envs=2".into()]);
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

fn args(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[test]
fn train_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&args(&tiny("train", d, &["--set", "seeds=[0,1]"])));
    }
    for seed in [0, 1] {
        let run = a.join(format!("seed_{seed}"));
        for f in ["metrics.csv", "timing.csv", "policy.bin", "policy.json", "summary.json"] {
            assert!(run.join(f).exists(), "{f} missing");
        }
        let csv = fs::read(run.join("metrics.csv")).unwrap();
        assert_eq!(csv, fs::read(b.join(format!("seed_{seed}/metrics.csv"))).unwrap());
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iteration,env_steps,mean_return,kl_mean,kl_raw_max,ratio_mean,clip_fraction,entropy,actor_lr,critic_loss,wall_time_s\n"));
        assert_eq!(text.lines().count(), 4);
    }
    assert_ne!(
        fs::read(a.join("seed_0/metrics.csv")).unwrap(),
        fs::read(a.join("seed_1/metrics.csv")).unwrap()
    );
    // echoed config reproduces the run
    let echoed: Value = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["trainer"]["iterations"], 3);
    assert_eq!(echoed["trainer"]["target_entropy"], -0.5);
}

#[test]
fn eval_deterministic_repeats_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&args(&tiny("train", &out, &["--trainer", "shac"])));
    let eval: Vec<String> = [
        "eval",
        "--out",
        out.to_str().unwrap(),
        "--trainer",
        "shac",
        "--mode",
        "deterministic",
        "--set",
        "eval.episodes=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let first: Value = serde_json::from_str(&ok(&args(&eval))).unwrap();
    let second: Value = serde_json::from_str(&ok(&args(&eval))).unwrap();
    assert_eq!(first, second);
    assert_eq!(first[0]["report"]["episodes"], 4);
    assert!(first[0]["report"]["mean_return"].as_f64().unwrap().is_finite());
}

#[test]
fn ablate_runs_four_variants() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    ok(&args(&tiny("ablate", &out, &["--set", "trainer.iterations=1"])));
    let load = |v: &str| -> Value { serde_json::from_str(&fs::read_to_string(out.join(v).join("config.json")).unwrap()).unwrap() };
    let full = load("full");
    for (variant, path, value) in [
        ("no_kl", "lambda_kl", Value::from(0.0)),
        ("epochs_2", "policy_epochs", Value::from(2)),
        ("no_clip", "clip_gate", Value::from(false)),
    ] {
        let cfg = load(variant);
        assert_eq!(cfg["trainer"][path], value);
        let mut patched = cfg.clone();
        patched["trainer"][path] = full["trainer"][path].clone();
        assert_eq!(patched, full, "{variant} differs beyond {path}");
        assert!(out.join(variant).join("seed_0/metrics.csv").exists());
    }
}

#[test]
fn bad_inputs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"trainer": {"policy_epoch": 2}}"#).unwrap();
    let out = rpo(&["train", "--config", bad.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("policy_epoch"));

    let out = rpo(&["train", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert!(!out.status.success());

    let out = rpo(&["eval", "--out", dir.path().join("nothing").to_str().unwrap()]);
    assert!(!out.status.success());

    let out = rpo(&["train", "--trainer", "dqn"]);
    assert!(!out.status.success());

    // diverging run aborts
    let run = dir.path().join("nan");
    let out = rpo(&args(&tiny("train", &run, &["--set", "trainer.actor_lr=1e300", "--set", "trainer.critic_lr=1e300"])));
    assert!(!out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn grad_check_and_estimator_lab() {
    let text = ok(&["grad-check", "--points", "3"]);
    assert!(text.lines().count() > 20);
    assert!(!text.contains("FAIL"));

    let report: Value = serde_json::from_str(&ok(&["estimator-lab", "--env", "chain", "--samples", "500"])).unwrap();
    assert_eq!(report["samples"], 500);
    assert_eq!(report["estimators"].as_array().unwrap().len(), 3);
    assert!(!rpo(&["estimator-lab", "--env", "pendulum"]).status.success());
}
