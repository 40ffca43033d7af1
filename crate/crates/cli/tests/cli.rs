use std::path::Path;
use std::process::{Command, Output};

use seamo::harness::RunConfig;

fn seamo(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seamo"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SEAMO_OUT")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut run = RunConfig::desk().with_seed(7);
    run.data.num_scenes = 8;
    run.train.stage1_epochs = 1;
    run.train.stage2_epochs = 1;
    run.probe.n_train = 16;
    run.probe.n_test = 16;
    run.probe.epochs = 20;
    let path = dir.join("small.json");
    std::fs::write(&path, run.to_json()).unwrap();
    path
}

fn error_line(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn pretrain_is_deterministic_and_checkpoints_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let r = seamo(&["pretrain", "--config", cfg], out);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    }
    let csv = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, std::fs::read(b.join("metrics.csv")).unwrap());
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next(), Some("step,lr,loss_total,loss_opt,loss_sar,seconds"));
    assert!(a.join("single_time.ckpt").exists() && a.join("multi_time.ckpt").exists());

    let r = seamo(&["inspect-ckpt", a.join("multi_time.ckpt").to_str().unwrap()], &a);
    assert!(r.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    assert_eq!(doc["stage"], "multi_time");
    assert_eq!(doc["tm_enabled"], true);

    let r = seamo(&["probe"], &a);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("linear_probe.json")).unwrap()).unwrap();
    assert!(report["accuracy"].as_f64().unwrap() >= 0.0);
    assert!(report["raw_pixel_accuracy"].is_number());

    let mut other = RunConfig::from_json(&std::fs::read_to_string(cfg).unwrap()).unwrap();
    other.model.encoder.embed_dim = 32;
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_json()).unwrap();
    let r = seamo(&["probe", "--config", other_path.to_str().unwrap()], &a);
    assert_eq!(r.status.code(), Some(3));
    assert_eq!(error_line(&r)["error"], "checkpoint");

    let ckpt = a.join("multi_time.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    std::fs::write(&ckpt, bytes).unwrap();
    for args in [vec!["inspect-ckpt", ckpt.to_str().unwrap()], vec!["probe"]] {
        let r = seamo(&args, &a);
        assert_eq!(r.status.code(), Some(3));
        let err = error_line(&r);
        assert!(err["message"].as_str().unwrap().contains("checksum"), "{err}");
    }
}

#[test]
fn config_errors_exit_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
    v["model"]["encoder"]["width"] = 3.into();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, v.to_string()).unwrap();
    let r = seamo(&["pretrain", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(r.status.code(), Some(2));
    let err = error_line(&r);
    assert_eq!(err["error"], "config");
    assert_eq!(err["path"], "model.encoder.width");

    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
    v["train"]["batch_size"] = 0.into();
    std::fs::write(&bad, v.to_string()).unwrap();
    let r = seamo(&["crop-demo", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(r.status.code(), Some(2));
    assert_eq!(error_line(&r)["path"], "train.batch_size");

    let r = seamo(&["pretrain", "--config", dir.path().join("missing.json").to_str().unwrap()], dir.path());
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn missing_checkpoint_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let r = seamo(&["finetune"], dir.path());
    assert_eq!(r.status.code(), Some(3));
}

#[test]
fn gradcheck_reports_every_primitive() {
    let dir = tempfile::tempdir().unwrap();
    let r = seamo(&["gradcheck", "--instances", "3"], dir.path());
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let stdout = String::from_utf8(r.stdout).unwrap();
    let lines: Vec<_> = stdout.lines().collect();
    assert!(lines.len() > 10);
    assert!(lines.iter().all(|l| l.ends_with(" ok")), "{stdout}");
    assert!(lines.iter().any(|l| l.starts_with("pretrain_loss")));
}

#[test]
fn crop_demo_honours_seamo_out() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let r = Command::new(env!("CARGO_BIN_EXE_seamo"))
        .args(["crop-demo", "--draws", "3", "--out"])
        .arg(dir.path().join("ignored"))
        .env("SEAMO_OUT", &target)
        .output()
        .unwrap();
    assert!(r.status.success());
    let doc: serde_json::Value = serde_json::from_slice(&r.stdout).unwrap();
    let strategies = doc["strategies"].as_object().unwrap();
    assert_eq!(strategies.len(), 3);
    for s in strategies.values() {
        assert_eq!(s["draws"].as_array().unwrap().len(), 3);
    }
    assert!(target.join("crop_demo.json").exists());
    assert!(!dir.path().join("ignored").exists());
}
