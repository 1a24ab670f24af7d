use std::path::Path;
use std::process::{Command, Output};

fn clp(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clp"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env("CLP_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = clp(args, dir);
    assert!(
        out.status.success(),
        "clp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) {
    ok(&["synth-data", "--dir", "data", "--bytes", "60000"], dir);
    std::fs::write(
        dir.join("config.json"),
        r#"{"profile": "quick", "out_dir": "run", "eval": {"throughput": {"batch": 1, "prompt_len": 8, "gen_len": 4, "warmup": 0, "repetitions": 1}}}"#,
    )
    .unwrap();
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let cfg = ["--config", "config.json"];
    let with = |extra: &[&'static str]| -> Vec<&str> { extra.iter().copied().chain(cfg).collect() };

    let out = ok(&with(&["run-all"]), dir);
    assert!(out.contains("retention"), "{out}");
    for f in [
        "config.json",
        "dense.ckpt",
        "train_curve.csv",
        "trajectory.csv",
        "window.json",
        "pruned.ckpt",
        "tuned_endpoint.ckpt",
        "tune_curve_endpoint.csv",
        "report_tuned_endpoint.json",
        "cka_tuned_endpoint.csv",
    ] {
        assert!(dir.join("run").join(f).is_file(), "missing {f}");
    }
    let trajectory = std::fs::read_to_string(dir.join("run/trajectory.csv")).unwrap();
    assert!(trajectory.starts_with("# config_hash: "));
    assert!(trajectory.lines().nth(1) == Some("step,a,loss"));

    let oracle = ok(&with(&["oracle"]), dir);
    assert!(oracle.contains("ranks"), "{oracle}");
    assert!(dir.join("run/agreement.json").is_file());

    ok(&with(&["baseline-reverse"]), dir);
    let out = ok(&with(&["eval", "--checkpoint", "run/reverse.ckpt"]), dir);
    assert!(out.contains("ppl"));
    assert!(dir.join("run/report_reverse.json").is_file());

    ok(&with(&["finetune", "--mode", "lowrank"]), dir);
    ok(&with(&["eval", "--mode", "lowrank"]), dir);
    assert!(dir.join("run/report_tuned_lowrank.json").is_file());

    let sweep = ok(&with(&["k-sweep"]), dir);
    assert_eq!(sweep.lines().count(), 3);
    let sweep = ok(&with(&["a-init-sweep"]), dir);
    assert_eq!(sweep.lines().count(), 3);
    let csv = std::fs::read_to_string(dir.join("run/a_init_sweep.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("k,a_init,final_a,start,n,rank,kl,ppl"));
}

#[test]
fn same_config_and_seed_reproduce_the_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    std::fs::write(dir.join("config.json"), r#"{"profile": "quick", "out_dir": "run"}"#).unwrap();
    ok(&["run-all", "--config", "config.json", "--seed", "3", "--out", "a"], dir);
    ok(&["run-all", "--config", "config.json", "--seed", "3", "--out", "b"], dir);
    for f in ["report_tuned_endpoint.json", "trajectory.csv", "dense.ckpt", "tuned_endpoint.ckpt"] {
        assert_eq!(
            std::fs::read(dir.join("a").join(f)).unwrap(),
            std::fs::read(dir.join("b").join(f)).unwrap(),
            "{f} differs"
        );
    }
}

#[test]
fn missing_prerequisites_name_the_producing_command() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = clp(&["calibrate", "--config", "config.json"], dir);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("clp train"), "{err}");

    ok(&["train", "--config", "config.json"], dir);
    let out = clp(&["prune", "--config", "config.json"], dir);
    assert!(String::from_utf8_lossy(&out.stderr).contains("clp calibrate"));
}

#[test]
fn lineage_mismatch_is_refused_unless_overridden() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(&["train", "--config", "config.json"], dir);
    let out = clp(&["calibrate", "--config", "config.json", "--seed", "9"], dir);
    assert_eq!(out.status.code(), Some(5));
    ok(&["calibrate", "--config", "config.json", "--k", "10"], dir);
    ok(&["calibrate", "--config", "config.json", "--seed", "9", "--allow-lineage-mismatch"], dir);
}

#[test]
fn exit_codes_distinguish_error_kinds() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let bad_rate = clp(&["train", "--config", "config.json", "--prune-rate", "0.01"], dir);
    assert_eq!(bad_rate.status.code(), Some(2));
    std::fs::write(dir.join("broken.json"), "{ not json").unwrap();
    assert_eq!(clp(&["train", "--config", "broken.json"], dir).status.code(), Some(2));
    std::fs::write(dir.join("nodata.json"), r#"{"profile": "quick", "data": {"train": "nope.txt", "calib": "nope.txt", "finetune": "nope.txt", "eval": "nope.txt"}}"#).unwrap();
    assert_eq!(clp(&["train", "--config", "nodata.json"], dir).status.code(), Some(2));
    let bad_mode = clp(&["train", "--mode", "lora"], dir);
    assert!(!bad_mode.status.success());
}

#[test]
fn show_config_applies_flags_over_the_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["show-config", "--prune-rate", "0.25", "--k", "3", "--a-init", "2"], tmp.path());
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["calib"]["k"], 3.0);
    assert_eq!(v["calib"]["a_init"], 2.0);
    assert_eq!(v["calib"]["learning_rate"], 0.5);
    assert_eq!(v["calib"]["epochs"], 1);
    assert_eq!(v["calib"]["samples"], 3000);
    assert_eq!(v["calib"]["seq_len"], 256);
    assert_eq!(v["tune"]["epochs"], 2);
    assert_eq!(v["tune"]["learning_rate"], 1e-5);
    assert_eq!(v["tune"]["batch_size"], 64);
    assert_eq!(v["tune"]["seq_len"], 256);
    assert_eq!(v["model"]["num_layers"], 12);
}
