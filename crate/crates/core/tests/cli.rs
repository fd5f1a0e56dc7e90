use std::path::Path;
use std::process::{Command, Output};

use oceancast::config::RunConfig;

fn oceancast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oceancast"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> String {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string(cfg).unwrap()).unwrap();
    path.display().to_string()
}

fn small(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::toy(dir.join("run"));
    cfg.data.n_steps = 120;
    cfg.pretrain.iterations = 10;
    cfg.eval.steps = 4;
    cfg.eval.init_stride = 6;
    cfg
}

#[test]
fn version_names_the_formats() {
    let out = oceancast(&["--version"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("checkpoint format") && text.contains("data format"), "{text}");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json").display().to_string();
    assert_eq!(oceancast(&["gen-data", "--config", &missing]).status.code(), Some(3));

    let mut v = serde_json::to_value(small(dir.path())).unwrap();
    v["pretrain"]["mystery"] = serde_json::json!(1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    assert_eq!(oceancast(&["gen-data", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write_config(dir.path(), &small(dir.path()));
    let ckpt = dir.path().join("absent.ckpt").display().to_string();
    let out = oceancast(&["predict", "--config", &cfg, "--from", &ckpt, "--init", "2000-01-20T00:00:00Z", "--steps", "2"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn evaluate_reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &small(dir.path()));
    assert!(oceancast(&["gen-data", "--config", &cfg]).status.success());
    assert!(oceancast(&["train", "--config", &cfg]).status.success());
    // existing outputs are refused without --force
    assert_eq!(oceancast(&["gen-data", "--config", &cfg]).status.code(), Some(3));

    let ckpt = dir.path().join("run/checkpoints/pretrain/model.ckpt").display().to_string();
    for id in ["a", "b"] {
        let out = oceancast(&["evaluate", "--config", &cfg, "--from", &ckpt, "--run-id", id]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let reports = dir.path().join("run/reports");
    for f in ["rmse.csv", "rmse_by_depth.csv", "maps.json", "obs_eval.csv"] {
        let a = std::fs::read(reports.join("a").join(f)).unwrap();
        let b = std::fs::read(reports.join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between reruns");
    }
}
