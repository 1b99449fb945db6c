use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[model]
dim = 8

[model.dynamic]
encoder_layers = 1

[train]
epochs = 3

[eval]
seeds = [0, 1]
"#;

fn triprec(out: &Path, args: &[&str]) -> Output {
    let output = Command::new(env!("CARGO_BIN_EXE_triprec"))
        .args(args)
        .env("TRIPREC_OUT_DIR", out)
        .env_remove("RUST_BACKTRACE")
        .output()
        .expect("binary runs");
    assert!(
        output.status.success(),
        "triprec {args:?} failed:\n{}",
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();

    triprec(&out, &["gen-synth", "--users", "20"]);
    assert!(out.join("dataset").join("train.jsonl").is_file());
    assert!(out.join("checkins.tsv").is_file());

    // The flag overrides the file's three epochs.
    triprec(&out, &["--config", cfg, "train", "--epochs", "2"]);
    let ckpt = json(&out.join("checkpoint.json"));
    assert_eq!(ckpt["epoch"], 2);
    assert_eq!(ckpt["config"]["seed"], 3);
    assert_eq!(ckpt["config"]["model"]["dim"], 8);
    let hash = ckpt["config_hash"].as_str().unwrap().to_string();

    triprec(&out, &["evaluate", "--baseline"]);
    let report = json(&out.join("eval_test.json"));
    let rows = report.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["per_seed"].as_array().unwrap().len(), 2);
    assert_eq!(rows[0]["config_hash"].as_str().unwrap().len(), hash.len());
    assert!(std::fs::read_to_string(out.join("eval_test.txt"))
        .unwrap()
        .contains("popularity"));

    let user = std::fs::read_to_string(out.join("dataset").join("test.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(user.lines().next().unwrap()).unwrap();
    let user = first["user_id"].as_str().unwrap();
    let stops = first["outoftown"].as_array().unwrap().len();
    let svg = out.join("rec.svg");
    let rec = triprec(&out, &["recommend", "--user", user, "--plot", svg.to_str().unwrap()]);
    let ids: Vec<usize> = String::from_utf8(rec.stdout)
        .unwrap()
        .lines()
        .map(|l| l.trim().parse().unwrap())
        .collect();
    assert_eq!(ids.len(), stops);
    assert!(svg.is_file());
    // Same sampling seed, same trip.
    let again = triprec(&out, &["recommend", "--user", user]);
    let again: Vec<usize> = String::from_utf8(again.stdout)
        .unwrap()
        .lines()
        .map(|l| l.parse().unwrap())
        .collect();
    assert_eq!(ids, again);

    triprec(&out, &["plot-case", "--user", user]);
    assert!(out.join(format!("case_{user}.svg")).is_file());

    triprec(
        &out,
        &[
            "--config",
            cfg,
            "ablate",
            "--variants",
            "full,wo_OD",
            "--epochs",
            "1",
            "--seeds",
            "5",
        ],
    );
    let ablation = json(&out.join("ablation.json"));
    let labels: Vec<&str> = ablation
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(labels, ["full", "wo_OD"]);
    assert_eq!(ablation[0]["per_seed"][0]["seed"], 5);
}

#[test]
fn resume_with_changed_settings_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap();
    triprec(&out, &["gen-synth", "--users", "20"]);
    triprec(&out, &["--config", cfg, "train", "--epochs", "1"]);

    let status = Command::new(env!("CARGO_BIN_EXE_triprec"))
        .args(["--config", cfg, "train", "--resume", "--lr", "0.5"])
        .env("TRIPREC_OUT_DIR", &out)
        .output()
        .unwrap();
    assert!(!status.status.success());
    assert!(String::from_utf8_lossy(&status.stderr).contains("config hash mismatch"));
}

#[test]
fn out_dir_flag_beats_environment() {
    let dir = tempfile::tempdir().unwrap();
    let env_out = dir.path().join("env");
    let flag_out = dir.path().join("flag");
    triprec(
        &env_out,
        &["gen-synth", "--users", "20", "--out-dir", flag_out.to_str().unwrap()],
    );
    assert!(flag_out.join("dataset").is_dir());
    assert!(!env_out.join("dataset").exists());
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[eval]\ntop_p = 2.0\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_triprec"))
        .args(["--config", cfg.to_str().unwrap(), "gen-synth"])
        .env("TRIPREC_OUT_DIR", dir.path())
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("top_p"));
}
