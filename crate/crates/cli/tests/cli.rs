use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn sda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sda"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = sda(args);
    assert!(out.status.success(), "sda {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

fn err(args: &[&str]) -> Value {
    let out = sda(args);
    assert!(!out.status.success(), "sda {args:?} should fail");
    let line = String::from_utf8_lossy(&out.stderr);
    let last = line.lines().last().expect("error line");
    serde_json::from_str(last).expect("JSON error on stderr")
}

const CONFIG: &str = r#"{
    "architecture": "tiny",
    "stride_s": 8,
    "val_per_member": 1,
    "train": {"max_epochs": 2, "batch_size": 16, "max_windows_per_epoch": 64, "seed": 2},
    "synth": {
        "n_infants": 9, "record_minutes": 4.0, "seizure_rate_per_hour": 40.0,
        "seizure_amplitude_uv": [60.0, 90.0], "n_test_infants": 3, "n_val_infants": 2,
        "n_control_infants": 0, "seed": 4
    }
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: String,
    manifest: String,
    ensemble: String,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("config.json");
        std::fs::write(&config, CONFIG).unwrap();
        let config = config.to_string_lossy().into_owned();
        let data = root.join("data").to_string_lossy().into_owned();
        let out = ok(&["synth", "--config", &config, "--out", &data]);
        let manifest = out["manifest"].as_str().unwrap().to_string();
        let ens_dir = root.join("ens").to_string_lossy().into_owned();
        let out = ok(&["train", "--config", &config, "--manifest", &manifest, "--mode", "ensemble", "--out", &ens_dir]);
        let ensemble = out["ensemble"].as_str().unwrap().to_string();
        Fixture {
            _dir: dir,
            root,
            config,
            manifest,
            ensemble,
        }
    })
}

fn path(root: &Path, name: &str) -> String {
    root.join(name).to_string_lossy().into_owned()
}

#[test]
fn validate_reports_split_counts() {
    let f = fixture();
    let report = ok(&["validate", "--manifest", &f.manifest, "--require", "train,val,test"]);
    assert_eq!(report["n_entries"], 9);
    assert_eq!(report["split_counts"]["val"], 2);
    assert!(report["failures"].as_array().unwrap().is_empty());
}

#[test]
fn validate_fails_on_missing_split() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"synth": {"n_infants": 3, "record_minutes": 2.0, "n_test_infants": 1, "n_control_infants": 1}}"#).unwrap();
    let data = path(dir.path(), "data");
    ok(&["synth", "--config", config.to_str().unwrap(), "--out", &data]);
    let m = path(dir.path(), "data/manifest.json");
    let out = sda(&["validate", "--manifest", &m, "--require", "val"]);
    assert!(!out.status.success());
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["failures"][0]["reason"].as_str().unwrap().contains("val"));
}

#[test]
fn ensemble_mode_writes_three_members() {
    let f = fixture();
    let dir = Path::new(&f.ensemble).parent().unwrap();
    let ckpts = std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "ckpt"))
        .count();
    assert_eq!(ckpts, 3);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(&f.ensemble).unwrap()).unwrap();
    assert_eq!(manifest["members"].as_array().unwrap().len(), 3);
    assert_eq!(manifest["metadata"]["config_hash"].as_str().unwrap().len(), 64);
    for i in 0..3 {
        let log = std::fs::read_to_string(dir.join(format!("training_log_member_{i}.csv"))).unwrap();
        assert!(log.starts_with("epoch,train_loss,val_auc,lr,stopped_flag"));
    }
}

#[test]
fn eval_report_curves_and_loo() {
    let f = fixture();
    let out = path(&f.root, "eval");
    let report = ok(&[
        "eval", "--config", &f.config, "--manifest", &f.manifest, "--model", &f.ensemble, "--out", &out, "--loo",
        "--operating-point", "fdh=0.25",
    ]);
    let auc = report["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert_eq!(report["record_ids"].as_array().unwrap().len(), 3);
    assert_eq!(report["operating_point"]["max_fd_per_hour"], 0.25);
    let loo = std::fs::read_to_string(Path::new(&out).join("loo.csv")).unwrap();
    assert_eq!(loo.lines().count(), 1 + 3);
    for name in ["report.json", "roc.csv", "detection.csv", "run.json"] {
        assert!(Path::new(&out).join(name).exists(), "{name} missing");
    }
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(Path::new(&out).join("report.json")).unwrap()).unwrap();
    assert_eq!(saved["config_hash"], report["config_hash"]);
    let traces = std::fs::read_dir(Path::new(&out).join("traces")).unwrap().count();
    assert_eq!(traces, 3);
}

#[test]
fn fuse_sweep_and_endpoints() {
    let f = fixture();
    let base = path(&f.root, "base");
    ok(&["train", "--config", &f.config, "--manifest", &f.manifest, "--mode", "base", "--out", &base]);
    let model = path(&f.root, "base/model.ckpt");
    let out = path(&f.root, "fuse");
    let summary = ok(&[
        "fuse", "--config", &f.config, "--manifest", &f.manifest, "--first", &f.ensemble, "--second", &model, "--out", &out,
    ]);
    let sweep = std::fs::read_to_string(Path::new(&out).join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().skip(1).collect();
    assert_eq!(rows.iter().filter(|r| r.contains(",arithmetic,")).count(), 21);
    assert_eq!(rows.iter().filter(|r| r.contains(",geometric,")).count(), 21);

    // Endpoints equal each classifier scored alone on the val split.
    for (key, model) in [("val_auc_first", f.ensemble.as_str()), ("val_auc_second", model.as_str())] {
        let eval_dir = path(&f.root, &format!("val_{key}"));
        let r = ok(&["eval", "--config", &f.config, "--manifest", &f.manifest, "--model", model, "--split", "val", "--out", &eval_dir]);
        assert_eq!(r["auc"], summary[key], "{key}");
    }
    let best = summary["val_auc"].as_f64().unwrap();
    assert!(best >= summary["val_auc_first"].as_f64().unwrap());
    assert!(best >= summary["val_auc_second"].as_f64().unwrap());
    assert!(Path::new(&out).join("fusion_spec.json").exists());
    assert!(Path::new(&out).join("fused_report.json").exists());
}

#[test]
fn ga_transfer_needs_group_and_pretrained() {
    let f = fixture();
    let out = path(&f.root, "ga");
    let e = err(&["train", "--config", &f.config, "--manifest", &f.manifest, "--mode", "ga_transfer", "--pretrained", &f.ensemble, "--out", &out]);
    assert_eq!(e["error"]["kind"], "config");
    let e = err(&["train", "--config", &f.config, "--manifest", &f.manifest, "--mode", "ga_transfer", "--group", "1", "--out", &out]);
    assert_eq!(e["error"]["kind"], "config");
    let e = err(&["train", "--config", &f.config, "--manifest", &f.manifest, "--mode", "ga_transfer", "--group", "4", "--pretrained", &f.ensemble, "--out", &out]);
    assert_eq!(e["error"]["kind"], "config");
}

#[test]
fn bad_inputs_give_json_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"trian": {}}"#).unwrap();
    let e = err(&["synth", "--config", config.to_str().unwrap(), "--out", &path(dir.path(), "x")]);
    assert_eq!(e["error"]["kind"], "json");
    assert!(e["error"]["message"].as_str().unwrap().contains("unknown field"));

    let e = err(&["eval", "--model", "/nonexistent/m.ckpt", "--manifest", "/nonexistent/m.json", "--out", &path(dir.path(), "y")]);
    assert_eq!(e["error"]["kind"], "io");

    let e = err(&["eval", "--operating-point", "fdh=abc"]);
    assert_eq!(e["error"]["kind"], "config");

    let e = err(&["train", "--mode", "sideways"]);
    assert_eq!(e["error"]["kind"], "usage");

    let out = Command::new(env!("CARGO_BIN_EXE_sda"))
        .args(["validate", "--manifest", "/nonexistent.json"])
        .env("SDA_THREADS", "0")
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn seed_flag_changes_the_hash() {
    let f = fixture();
    let a = ok(&["synth", "--config", &f.config, "--out", &path(&f.root, "s1")]);
    let b = ok(&["synth", "--config", &f.config, "--seed", "99", "--out", &path(&f.root, "s2")]);
    assert_ne!(a["config_hash"], b["config_hash"]);
    let c = ok(&["synth", "--config", &f.config, "--out", &path(&f.root, "s3")]);
    assert_eq!(a["config_hash"], c["config_hash"]);
}

#[test]
fn fuse_can_smooth_after_fusion() {
    let f = fixture();
    let run = |name: &str, extra: &[&str]| {
        let out = path(&f.root, name);
        let mut args = vec![
            "fuse", "--config", &f.config, "--manifest", &f.manifest, "--first", &f.ensemble, "--second", &f.ensemble,
            "--smooth-width", "3", "--out", &out,
        ];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let before = run("fuse_before", &[]);
    let after = run("fuse_after", &["--smooth-after-fusion"]);
    // Fusing a classifier with itself leaves the trace unchanged, so the order cannot matter.
    assert_eq!(before["val_auc"], after["val_auc"]);
    assert_ne!(before["config_hash"], after["config_hash"]);
}
