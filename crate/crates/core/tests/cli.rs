use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str], env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_cthdiff"));
    cmd.args(args).current_dir(dir).env_remove("CTHDIFF_CONFIG");
    if let Some(path) = env {
        cmd.env("CTHDIFF_CONFIG", path);
    }
    cmd.output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args, None);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_kind(out: &Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or_default();
    let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {stderr}"));
    v["error"]["kind"].as_str().unwrap().to_string()
}

#[test]
fn pipeline_emits_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["generate", "--out", "data/cohort.csv"]);
    ok(d, &["train", "--cohort", "data/cohort.csv", "--epochs", "1", "--out", "model/diffusion.ckpt"]);
    ok(
        d,
        &[
            "predict", "--ckpt", "model/diffusion.ckpt", "--cohort", "data/cohort.csv", "--realizations", "2",
            "--steps", "4", "--out", "pred/pred.csv",
        ],
    );
    let summary = ok(d, &["evaluate", "--pred", "pred/pred.csv", "--truth", "data/cohort.csv", "--out", "eval/report.json"]);
    assert!(summary.contains("MAE All"), "{summary}");

    for f in [
        "data/cohort.csv",
        "data/cohort.csv.config.json",
        "model/diffusion.ckpt",
        "model/diffusion.ckpt.loss.csv",
        "model/diffusion.ckpt.config.json",
        "pred/pred.csv",
        "pred/pred.csv.config.json",
        "eval/report.json",
        "eval/report.json.config.json",
        "eval/ba_points.csv",
        "eval/fit_points.csv",
    ] {
        assert!(d.join(f).is_file(), "missing {f}");
    }
    let trajectories = std::fs::read_dir(d.join("eval"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("trajectory_"))
        .count();
    assert_eq!(trajectories, 178);

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("eval/report.json")).unwrap()).unwrap();
    for key in ["mae_table", "bland_altman", "linear_fit", "uncertainty"] {
        assert!(!report[key].is_null(), "{key}");
    }
    assert_eq!(report["k"], 2);
    assert_eq!(report["months"], serde_json::json!([6, 12, 24, 36]));

    let log = std::fs::read_to_string(d.join("model/diffusion.ckpt.loss.csv")).unwrap();
    assert!(log.starts_with("epoch,step,loss,sigma_mean,wallclock_ms\n"));
    assert_eq!(log.lines().count(), 1 + 5094usize.div_ceil(64));
    let pred = std::fs::read_to_string(d.join("pred/pred.csv")).unwrap();
    assert_eq!(pred.lines().count(), 1 + 178 * 4 * 2);

    // The echo alone reproduces the run, overwriting the same output.
    let out = run(d, &["predict", "--config", "pred/pred.csv.config.json"], None);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(d.join("pred/pred.csv")).unwrap(), pred);
}

#[test]
fn usage_and_validation_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let out = run(d, &["predict", "--ckpt", "x", "--cohort", "y", "--months", "0", "--out", "p.csv"], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "validation");

    let out = run(d, &["train", "--cohort", "c.csv", "--out", "m", "--learning-rate", "1"], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(d, &[], None).status.code(), Some(2));

    let out = run(d, &["evaluate", "--pred", "missing.csv", "--truth", "t.csv", "--out", "r.json"], None);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "io");

    std::fs::write(d.join("bad.json"), r#"{"train": {"epochz": 3}}"#).unwrap();
    let out = run(d, &["generate", "--out", "c.csv"], Some("bad.json"));
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_kind(&out), "parse");
    assert!(!d.join("c.csv").exists());

    let out = run(d, &["train", "--out", "m.ckpt"], None);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--cohort"));
}

#[test]
fn config_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let spec = r#"{"cohort": {"seed": 7, "noise_std": 0.0}}"#;
    std::fs::write(d.join("run.json"), spec).unwrap();
    let out = run(d, &["generate", "--out", "env.csv"], Some("run.json"));
    assert!(out.status.success());
    ok(d, &["generate", "--config", "run.json", "--out", "flag.csv"]);
    ok(d, &["generate", "--out", "default.csv"]);
    let read = |f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read("env.csv"), read("flag.csv"));
    assert_ne!(read("env.csv"), read("default.csv"));
    let echo: serde_json::Value = serde_json::from_slice(&read("env.csv.config.json")).unwrap();
    assert_eq!(echo["cohort"]["seed"], 7);
    assert_eq!(echo["train"]["epochs"], 512);
}

#[test]
fn oracle_check_passes_with_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["oracle-check"]);
    assert_eq!(out.lines().filter(|l| l.ends_with("PASS")).count(), 4, "{out}");
}
