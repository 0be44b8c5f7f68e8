//! CLI behavior: command exit codes, the serve protocol, and checkpointed
//! restarts.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dpcate")
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dpcate_cli_{tag}_{}", std::process::id()));
    if dir.exists() {
        std::fs::remove_dir_all(&dir).unwrap();
    }
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn prepare_model(dir: &Path, bandwidth: &str, lambda: &str) {
    let p = |name: &str| dir.join(name).display().to_string();
    assert!(Command::new(bin())
        .args([
            "gen", "--kind", "dataset1", "--n", "600", "--seed", "5", "--out", &p("data.csv"),
        ])
        .status()
        .unwrap()
        .success());
    assert!(Command::new(bin())
        .args([
            "fit",
            "--data",
            &p("data.csv"),
            "--epsilon",
            "2",
            "--delta",
            "0.05",
            "--seed",
            "2",
            "--bandwidth",
            bandwidth,
            "--lambda",
            lambda,
            "--nuisance-out",
            &p("nuis.json"),
            "--model-out",
            &p("model.json"),
            "--ledger",
            &p("ledger.jsonl"),
        ])
        .status()
        .unwrap()
        .success());
}

fn serve(dir: &Path, input: &str, checkpoint: bool) -> Vec<String> {
    let p = |name: &str| dir.join(name).display().to_string();
    let mut args = vec![
        "serve".to_string(),
        "--model".into(),
        p("model.json"),
        "--nuisance".into(),
        p("nuis.json"),
        "--seed".into(),
        "9".into(),
        "--ledger".into(),
        p("serve_ledger.jsonl"),
    ];
    if checkpoint {
        args.push("--checkpoint".into());
        args.push(p("ckpt.json"));
    }
    let mut child = Command::new(bin())
        .args(&args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    child
        .stdin
        .as_mut()
        .unwrap()
        .write_all(input.as_bytes())
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "serve exited nonzero");
    String::from_utf8(out.stdout)
        .unwrap()
        .lines()
        .map(|s| s.to_string())
        .collect()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let output = Command::new(bin())
        .args(["gen", "--kind", "dataset1", "--out", "/tmp/never.csv"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "clap usage errors exit 2");
}

#[test]
fn unknown_learner_is_a_usage_error() {
    let dir = tmp_dir("usage");
    let p = |name: &str| dir.join(name).display().to_string();
    assert!(Command::new(bin())
        .args(["gen", "--kind", "dataset1", "--n", "50", "--seed", "1", "--out", &p("d.csv")])
        .status()
        .unwrap()
        .success());
    let output = Command::new(bin())
        .args([
            "fit",
            "--data",
            &p("d.csv"),
            "--epsilon",
            "1",
            "--learner",
            "tlearner",
            "--nuisance-out",
            &p("n.json"),
            "--model-out",
            &p("m.json"),
            "--ledger",
            &p("l.jsonl"),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_accepts_json_config() {
    let dir = tmp_dir("gencfg");
    let p = |name: &str| dir.join(name).display().to_string();
    std::fs::write(
        dir.join("cfg.json"),
        "{\"p\": 3, \"effect_kind\": \"dataset1\", \"n\": 40, \"seed\": 9, \"support_size\": 2}",
    )
    .unwrap();
    assert!(Command::new(bin())
        .args(["gen", "--config", &p("cfg.json"), "--out", &p("d.csv")])
        .status()
        .unwrap()
        .success());
    let body = std::fs::read_to_string(dir.join("d.csv")).unwrap();
    assert_eq!(body.lines().next().unwrap(), "x1,x2,x3,a,y");
    assert_eq!(body.lines().count(), 41);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gen_is_deterministic() {
    let dir = tmp_dir("gen");
    let p = |name: &str| dir.join(name).display().to_string();
    for out in ["a.csv", "b.csv"] {
        assert!(Command::new(bin())
            .args([
                "gen", "--kind", "dataset2", "--n", "200", "--seed", "3", "--out", &p(out),
            ])
            .status()
            .unwrap()
            .success());
    }
    assert_eq!(
        std::fs::read(dir.join("a.csv")).unwrap(),
        std::fs::read(dir.join("b.csv")).unwrap()
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn serve_answers_sequentially_and_survives_bad_requests() {
    let dir = tmp_dir("serve");
    prepare_model(&dir, "0.75", "0.05");
    let lines = serve(
        &dir,
        "{\"x\":[0.2,0.3]}\nnot json at all\n{\"x\":[0.5,0.5]}\n{\"x\":[0.9]}\n{\"x\":[0.8,0.1]}\n",
        false,
    );
    assert_eq!(lines.len(), 5);
    let v0: serde_json::Value = serde_json::from_str(&lines[0]).unwrap();
    assert_eq!(v0["query_index"], 1);
    assert!(v0["estimate"].is_f64());
    let v1: serde_json::Value = serde_json::from_str(&lines[1]).unwrap();
    assert!(v1["error"].as_str().unwrap().contains("bad request"));
    let v2: serde_json::Value = serde_json::from_str(&lines[2]).unwrap();
    assert_eq!(v2["query_index"], 2, "errors must not advance the state");
    let v3: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
    assert!(v3["error"].as_str().unwrap().contains("dimension"));
    let v4: serde_json::Value = serde_json::from_str(&lines[4]).unwrap();
    assert_eq!(v4["query_index"], 3);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn serve_checkpoint_restart_reproduces_the_stream() {
    let dir_full = tmp_dir("ckpt_full");
    prepare_model(&dir_full, "0.75", "0.05");
    let full = serve(
        &dir_full,
        "{\"x\":[0.1,0.2]}\n{\"x\":[0.3,0.4]}\n{\"x\":[0.5,0.6]}\n{\"x\":[0.7,0.8]}\n",
        true,
    );

    let dir_split = tmp_dir("ckpt_split");
    prepare_model(&dir_split, "0.75", "0.05");
    let mut split = serve(&dir_split, "{\"x\":[0.1,0.2]}\n{\"x\":[0.3,0.4]}\n", true);
    split.extend(serve(
        &dir_split,
        "{\"x\":[0.5,0.6]}\n{\"x\":[0.7,0.8]}\n",
        true,
    ));
    assert_eq!(full, split, "restart from checkpoint must reproduce the stream");
    std::fs::remove_dir_all(&dir_full).ok();
    std::fs::remove_dir_all(&dir_split).ok();
}

#[test]
fn audit_release_prints_warning_banner_and_raw_column() {
    let dir = tmp_dir("banner");
    prepare_model(&dir, "0.75", "0.05");
    let p = |name: &str| dir.join(name).display().to_string();
    let output = Command::new(bin())
        .args([
            "gen", "--kind", "dataset1", "--n", "10", "--seed", "1", "--out", &p("junk.csv"),
            "--queries", "20", "--queries-out", &p("q.csv"),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let output = Command::new(bin())
        .args([
            "release",
            "--model",
            &p("model.json"),
            "--nuisance",
            &p("nuis.json"),
            "--queries",
            &p("q.csv"),
            "--mechanism",
            "functional",
            "--seed",
            "4",
            "--audit",
            "--out",
            &p("est.csv"),
            "--ledger",
            &p("ledger.jsonl"),
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("WARNING"), "stderr: {stderr}");
    assert!(stderr.contains("NOT differentially"), "stderr: {stderr}");
    let table = std::fs::read_to_string(dir.join("est.csv")).unwrap();
    assert!(table.lines().next().unwrap().ends_with("estimate,raw_estimate"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn linear_second_stage_supports_finite_release() {
    let dir = tmp_dir("linear");
    let p = |name: &str| dir.join(name).display().to_string();
    assert!(Command::new(bin())
        .args([
            "gen", "--kind", "dataset1", "--n", "500", "--seed", "6", "--out", &p("d.csv"),
            "--queries", "25", "--queries-out", &p("q.csv"),
        ])
        .status()
        .unwrap()
        .success());
    assert!(Command::new(bin())
        .args([
            "fit",
            "--data",
            &p("d.csv"),
            "--epsilon",
            "1",
            "--seed",
            "1",
            "--second-stage",
            "linear",
            "--basis-degree",
            "2",
            "--covariate-bounds",
            "0:1,0:1",
            "--nuisance-out",
            &p("n.json"),
            "--model-out",
            &p("m.json"),
            "--ledger",
            &p("l.jsonl"),
        ])
        .status()
        .unwrap()
        .success());
    assert!(Command::new(bin())
        .args([
            "release",
            "--model",
            &p("m.json"),
            "--nuisance",
            &p("n.json"),
            "--queries",
            &p("q.csv"),
            "--mechanism",
            "finite",
            "--seed",
            "2",
            "--out",
            &p("r.json"),
            "--ledger",
            &p("l.jsonl"),
        ])
        .status()
        .unwrap()
        .success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["private_estimates"].as_array().unwrap().len(), 25);
    // The functional mechanism must refuse a non-KRR stage 2.
    let output = Command::new(bin())
        .args([
            "release",
            "--model",
            &p("m.json"),
            "--nuisance",
            &p("n.json"),
            "--queries",
            &p("q.csv"),
            "--mechanism",
            "functional",
            "--seed",
            "3",
            "--out",
            &p("r2.csv"),
            "--ledger",
            &p("l2.jsonl"),
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2), "kernel requirement is a usage error");
    assert!(
        !dir.join("l2.jsonl").exists(),
        "a rejected request must not consume any budget"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn refitting_a_consumed_budget_is_refused() {
    let dir = tmp_dir("refit");
    let p = |name: &str| dir.join(name).display().to_string();
    assert!(Command::new(bin())
        .args(["gen", "--kind", "dataset1", "--n", "150", "--seed", "4", "--out", &p("d.csv")])
        .status()
        .unwrap()
        .success());
    let fit = |nuis: &str, model: &str| {
        Command::new(bin())
            .args([
                "fit",
                "--data",
                &p("d.csv"),
                "--epsilon",
                "inf",
                "--seed",
                "2",
                "--nuisance-out",
                &p(nuis),
                "--model-out",
                &p(model),
                "--ledger",
                &p("ledger.jsonl"),
            ])
            .output()
            .unwrap()
    };
    assert!(fit("n1.json", "m1.json").status.success());
    let second = fit("n2.json", "m2.json");
    assert_eq!(second.status.code(), Some(3), "identical refit must be refused");
    assert!(!dir.join("n2.json").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ledger_env_variable_is_honored() {
    let dir = tmp_dir("env");
    let p = |name: &str| dir.join(name).display().to_string();
    assert!(Command::new(bin())
        .args(["gen", "--kind", "dataset1", "--n", "120", "--seed", "2", "--out", &p("d.csv")])
        .status()
        .unwrap()
        .success());
    assert!(Command::new(bin())
        .args([
            "fit",
            "--data",
            &p("d.csv"),
            "--epsilon",
            "1",
            "--seed",
            "1",
            "--nuisance-out",
            &p("n.json"),
            "--model-out",
            &p("m.json"),
        ])
        .env("DPCATE_LEDGER", p("env_ledger.jsonl"))
        .status()
        .unwrap()
        .success());
    assert!(dir.join("env_ledger.jsonl").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn audit_subcommands_report_pass() {
    let output = Command::new(bin())
        .args([
            "audit",
            "sensitivity",
            "--n",
            "30",
            "--trials",
            "40",
            "--seed",
            "1",
        ])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("PASS"), "stdout: {stdout}");
}
