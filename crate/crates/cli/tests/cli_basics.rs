//! Binary-level checks: exit codes, --print-config, corpus determinism.

use std::path::Path;
use std::process::Command;

fn musemask() -> Command {
    Command::new(env!("CARGO_BIN_EXE_musemask"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("config.json");
    std::fs::write(
        &p,
        r#"{"seed": 11, "data": {"n_scenes": 6}}"#,
    )
    .unwrap();
    p
}

#[test]
fn print_config_dumps_effective_json() {
    let out = musemask().args(["--print-config"]).output().unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["data"]["n_scenes"], 2000);
    assert_eq!(v["stage1"]["batch"], 16);

    // --seed override shows up in the dump
    let out = musemask().args(["--print-config", "--seed", "123"]).output().unwrap();
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["seed"], 123);
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    std::fs::write(&p, r#"{"sampler": {"steps": 0}}"#).unwrap();
    let out = musemask()
        .args(["gen-data", "--config"])
        .arg(&p)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_artifacts_exit_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = musemask()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("empty"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_data_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    for _ in 0..2 {
        let out = musemask()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&run)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    let m1 = std::fs::read(run.join("corpus/manifest.jsonl")).unwrap();
    // third run with explicit determinism flag must match too
    let out = musemask()
        .args(["gen-data", "--deterministic", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert_eq!(m1, std::fs::read(run.join("corpus/manifest.jsonl")).unwrap());
    // run log exists and carries the config hash
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("logs/gen-data.json")).unwrap()).unwrap();
    assert!(log["config_hash"].as_str().unwrap().len() == 16);
}

#[test]
fn edit_with_unknown_class_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    // corpus + a fake request pointing at corpus files; checkpoints are
    // missing so the command must fail before writing anything
    let out = musemask()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success());
    let req = dir.path().join("req.json");
    std::fs::write(
        &req,
        format!(
            r#"{{"mode":"edit","reference":"{}","map":"{}","edit_text":"long hair","caption":"medium face","seed":1}}"#,
            run.join("corpus/images/s000000.ppm").display(),
            run.join("corpus/maps/s000000_sn.pgm").display()
        ),
    )
    .unwrap();
    let out = musemask()
        .args(["edit", "--request"])
        .arg(&req)
        .args(["--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert!(!run.join("edits").exists());
}

#[test]
fn training_is_exact_replay() {
    // tiny budgets: the checkpoint bytes must be a pure function of the config
    let dir = tempfile::tempdir().unwrap();
    let cfgp = dir.path().join("cfg.json");
    std::fs::write(
        &cfgp,
        r#"{"seed": 5, "data": {"n_scenes": 6}, "ae": {"base_steps": 5, "base_batch": 2}}"#,
    )
    .unwrap();
    let run = dir.path().join("run");
    let gen = musemask()
        .args(["gen-data", "--config"])
        .arg(&cfgp)
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(gen.status.success());
    let mut bytes = Vec::new();
    for _ in 0..2 {
        let out = musemask()
            .args(["train-ae", "--deterministic", "--config"])
            .arg(&cfgp)
            .arg("--out")
            .arg(&run)
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        bytes.push(std::fs::read(run.join("ae_base.mkdf")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1], "checkpoint bytes differ between replays");
}
