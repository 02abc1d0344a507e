mod common;

use std::path::Path;
use std::process::{Command, Output};

fn mbq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mbq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("cfg.txt");
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn gen_data_train_and_verify() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), common::SMALL);
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = mbq(&["--config", &cfg, "--out-dir", out_s, "gen-data"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let train = std::fs::read_to_string(out.join("data/train.csv")).unwrap();
    assert!(train.starts_with("x0,x1,x2,x3,label\n"));
    assert_eq!(train.lines().count(), 1 + 256);

    let o = mbq(&["--config", &cfg, "--out-dir", out_s, "--seed-override", "7", "train"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("checkpoints/epoch_0015.ckpt").exists());
    let config = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(config.contains("seeds = 7\n"), "{config}");

    let o = mbq(&["verify", out_s]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));

    // config.txt now describes the original seed list; the checkpoints do not
    let o = mbq(&["--config", &cfg, "--out-dir", out_s, "gen-data"]);
    assert!(o.status.success());
    let o = mbq(&["verify", out_s]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("MISMATCH"));

    let clean = dir.path().join("clean");
    let o = mbq(&["--config", &cfg, "--out-dir", clean.to_str().unwrap(), "overlap"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = mbq(&["--out-dir", clean.to_str().unwrap(), "verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn tampered_file_fails_verification() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), common::SMALL);
    let out = dir.path().join("out");
    let o = mbq(&[
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "run",
        "--kind",
        "bias-over-training",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = out.join("bias_over_training.csv");
    let text = std::fs::read_to_string(&csv).unwrap();
    let (first, rest) = text.split_once('\n').unwrap();
    std::fs::write(&csv, format!("{}0\n{rest}", &first[..first.len() - 1])).unwrap();
    let o = mbq(&["verify", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn exit_codes_separate_bad_input_from_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let cfg = write_config(dir.path(), "[data]\nn = 1\n");
    assert_eq!(
        mbq(&["--config", &cfg, "--out-dir", out_s, "train"]).status.code(),
        Some(1)
    );

    let cfg = write_config(dir.path(), "[experiment]\nkind = overlap\n");
    assert_eq!(
        mbq(&["--config", &cfg, "--out-dir", out_s, "bias-scan"]).status.code(),
        Some(1)
    );

    assert_eq!(
        mbq(&["--config", "/nonexistent/cfg.txt", "train"]).status.code(),
        Some(1)
    );

    let diverging = format!(
        "{}\n[train]\nlr = 1e6\nmomentum = 0\n",
        common::SMALL.replace("[train]\n", "[train]\nbeta = 1.0\n")
    );
    let cfg = write_config(dir.path(), &diverging);
    let o = mbq(&["--config", &cfg, "--out-dir", out_s, "train"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged at epoch"));
}
