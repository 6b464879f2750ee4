use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn initgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_initgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Trains with zero learning rates, leaving G at its initialisation.
fn untrained_checkpoint(dir: &Path) -> std::path::PathBuf {
    let o = initgan(&[
        "train",
        "--out",
        path(dir),
        "--set",
        "steps=1",
        "--set",
        "lr_g=0",
        "--set",
        "lr_d=0",
        "--set",
        "embed_steps=50",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    dir.join("step_1.ckpt")
}

#[test]
fn zero_hops_is_rejected_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = initgan(&["train", "--out", path(&out), "--set", "hops=0"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hops"));
    assert!(!out.join("metrics.jsonl").exists());
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = initgan(&["train", "--out", path(dir.path()), "--set", "learning_rate=1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_config_names_the_path() {
    let o = initgan(&["train", "--config", "/nonexistent/base.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/base.cfg"));
}

#[test]
fn train_writes_resolved_config_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("base.cfg");
    fs::write(&cfg, "# small run\nsteps = 12\nembed_steps = 20\nseed = 3\n").unwrap();
    let out = dir.path().join("run");
    let o = initgan(&["train", "--config", path(&cfg), "--set", "seed=7", "--out", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved = fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(resolved.contains("seed = 7"));
    assert!(resolved.contains("steps = 12"));
    assert!(out.join("step_12.ckpt").exists());
    assert_eq!(
        fs::read_to_string(out.join("metrics.jsonl")).unwrap().lines().count(),
        12
    );
}

#[test]
fn missing_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = initgan(&[
        "eval",
        "--out",
        path(dir.path()),
        "--checkpoint",
        "/nonexistent/step_1.ckpt",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn corrupt_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    fs::write(&ckpt, b"not a checkpoint at all").unwrap();
    let o = initgan(&["eval", "--out", path(dir.path()), "--checkpoint", path(&ckpt)]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn untrained_eval_is_near_chance_and_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = untrained_checkpoint(&dir.path().join("train"));
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = initgan(&[
            "eval",
            "--checkpoint",
            path(&ckpt),
            "--out",
            path(&out),
            "--set",
            "embed_steps=50",
            "--set",
            "steps=1",
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        outputs.push((
            fs::read(out.join("metrics.json")).unwrap(),
            fs::read(out.join("metrics.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    let report: serde_json::Value = serde_json::from_slice(&outputs[0].0).unwrap();
    assert_eq!(report["samples"], 5000);
    for bit in report["acc_per_bit"].as_array().unwrap() {
        let acc = bit.as_f64().unwrap();
        assert!((acc - 0.5).abs() <= 0.15, "bit accuracy {acc}");
    }
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = initgan(&[
        "train",
        "--out",
        path(&first),
        "--set",
        "steps=6",
        "--set",
        "embed_steps=20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = dir.path().join("second");
    let o = initgan(&[
        "train",
        "--out",
        path(&second),
        "--set",
        "steps=10",
        "--set",
        "embed_steps=20",
        "--checkpoint",
        path(&first.join("step_6.ckpt")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(second.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );
}

#[test]
fn ablate_writes_table_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = initgan(&[
        "ablate",
        "--out",
        path(dir.path()),
        "--seeds",
        "0,1",
        "--set",
        "steps=10",
        "--set",
        "embed_steps=20",
        "--set",
        "eval_samples=200",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("variant,seed,aiw,mst,hops,fid,mean_acc,acc_bit_1,acc_bit_2,acc_bit_3,content_err"));
    assert!(dir.path().join("summary.json").exists());
    assert!(dir.path().join("config.cfg").exists());
}

#[test]
fn bad_seed_list_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = initgan(&["ablate", "--out", path(dir.path()), "--seeds", "0,x"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_and_fault_injection_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = initgan(&["check", "--out", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["passed"], true);
    for c in report["checks"].as_array().unwrap() {
        assert!(c.get("name").is_some() && c.get("measured").is_some() && c.get("threshold").is_some());
    }

    let o = initgan(&["check", "--out", path(dir.path()), "--inject-fault", "tanh"]);
    assert_eq!(o.status.code(), Some(4));
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let failed: Vec<&str> = report["checks"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|c| c["passed"] == false)
        .map(|c| c["name"].as_str().unwrap())
        .collect();
    assert!(failed.contains(&"grad.op.tanh"), "{failed:?}");
}

#[test]
fn unknown_fault_op_is_a_config_error() {
    let o = initgan(&["check", "--inject-fault", "warp"]);
    assert_eq!(o.status.code(), Some(2));
}
