use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"{
  "method": {"kind": "ocr"},
  "hidden_dims": [16],
  "epochs": 2,
  "batch_size": 16,
  "augment": {"crop_padding": 1},
  "benchmark": {"train_per_class": 3, "target_per_class": 3, "holdout_per_class": 3, "image_side": 8}
}"#;

fn ocr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocr")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ocr(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn gen_train_eval_attack_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("run");
    let out = out.to_str().unwrap();

    ok(&["gen-data", "--config", &cfg, "--out", out]);
    for f in ["source0.bin", "source1.bin", "source2.bin", "holdout.bin", "target.bin"] {
        assert!(tmp.path().join("run").join(f).exists(), "{f}");
    }

    ok(&["train", "--config", &cfg, "--out", out]);
    let metrics = fs::read_to_string(tmp.path().join("run/metrics.csv")).unwrap();
    // header, the untrained row at iteration 0, one row per epoch
    assert_eq!(metrics.lines().count(), 4);
    let ckpt = tmp.path().join("run/checkpoint.bin");
    let ckpt = ckpt.to_str().unwrap();

    let target = tmp.path().join("run/target.bin");
    let eval: serde_json::Value =
        serde_json::from_str(&ok(&["eval", "--config", &cfg, "--checkpoint", ckpt, "--data", target.to_str().unwrap()]))
            .unwrap();
    let top1 = eval["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(eval["top5"].as_f64().unwrap() >= top1);

    let attack: serde_json::Value =
        serde_json::from_str(&ok(&["attack", "--config", &cfg, "--checkpoint", ckpt, "--method", "fgsm"])).unwrap();
    assert!(attack["robust_top1"].as_f64().unwrap() <= top1 + 1e-12);

    let fourier = ok(&["fourier", "--config", &cfg, "--checkpoint", ckpt, "--grid", "3", "--out", out]);
    assert_eq!(fourier, fs::read_to_string(tmp.path().join("run/fourier.csv")).unwrap());

    let tta: serde_json::Value =
        serde_json::from_str(&ok(&["tta", "--config", &cfg, "--checkpoint", ckpt, "--method", "bn-only"])).unwrap();
    assert_eq!(tta["segments"].as_array().unwrap().len(), 5);
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    ok(&["train", "--config", &cfg, "--seed", "3", "--out", a.to_str().unwrap()]);
    ok(&["train", "--config", &cfg, "--seed", "3", "--out", b.to_str().unwrap()]);
    for f in ["metrics.csv", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn error_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"batch_size": 0}"#).unwrap();
    assert_eq!(ocr(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));
    fs::write(&bad, "not json").unwrap();
    assert_eq!(ocr(&["train", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write_config(tmp.path());
    let ckpt = tmp.path().join("ckpt.bin");
    fs::write(&ckpt, b"OCRCKPT1\x01\x02").unwrap();
    assert_eq!(ocr(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]).status.code(), Some(3));
    fs::write(&ckpt, b"garbage").unwrap();
    assert_eq!(ocr(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap()]).status.code(), Some(3));

    assert_eq!(ocr(&["gen-data", "--config", &cfg]).status.code(), Some(2));
    assert_ne!(ocr(&["attack", "--method", "carlini"]).status.code(), Some(0));
}

#[test]
fn consistency_override() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let summary: serde_json::Value =
        serde_json::from_str(&ok(&["train", "--config", &cfg, "--consistency", "prediction-ce"])).unwrap();
    assert!(summary.to_string().contains("prediction-ce"), "{summary}");
    assert_eq!(ocr(&["train", "--config", &cfg, "--consistency", "mixup"]).status.code(), Some(2));
}
