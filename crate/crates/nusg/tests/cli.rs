//! End-to-end command-line behavior: exit codes, output formats,
//! determinism of artifacts.

mod common;

use common::{write_eye_dataset, write_gray_png};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn nusg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nusg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Train a small model once; tests that need a checkpoint share it.
fn trained_fixture() -> &'static (PathBuf, PathBuf) {
    use std::sync::OnceLock;
    static FIXTURE: OnceLock<(PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        write_eye_dataset(&dir, 6, 80, 60);
        let ckpt = dir.join("model.nusg");
        let cfg_path = dir.join("run.cfg");
        std::fs::write(
            &cfg_path,
            format!(
                "arch = u2net-lite\ndata_root = {}\ninput_size = 64\nsteps = 4\nbatch_size = 2\n\
                 seed = 3\ncheckpoint = {}\nlog = {}\ncheckpoint_every = 2\n",
                dir.display(),
                ckpt.display(),
                dir.join("log.csv").display()
            ),
        )
        .unwrap();
        let out = nusg(&["train", "--config", cfg_path.to_str().unwrap()]);
        assert_eq!(code(&out), 0, "fixture train failed: {}", stderr(&out));
        (dir, ckpt)
    })
}

#[test]
fn train_produces_checkpoint_and_full_log() {
    let (dir, ckpt) = trained_fixture();
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(dir.join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,wall_ms");
    assert_eq!(lines.len(), 1 + 4, "one row per step");
}

#[test]
fn train_rejects_missing_config_with_usage_exit() {
    let out = nusg(&["train", "--config", "/nonexistent/path.cfg"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_rejects_unknown_arch_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "arch = foo\ndata_root = /tmp\n").unwrap();
    let out = nusg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("arch"), "{}", stderr(&out));
}

#[test]
fn train_rejects_unknown_key_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "arch = u2net-lite\ndata_root = /tmp\nbananas = 7\n").unwrap();
    let out = nusg(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bananas"));
}

#[test]
fn summary_prints_budgets_and_rejects_unknown_arch() {
    let out = nusg(&["summary", "--arch", "res-u2net-lite"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("parameters: 1168882"), "{text}");
    assert!(text.contains("4.46 MB"), "{text}");
    assert!(text.contains("GMac"), "{text}");
    let out = nusg(&["summary", "--arch", "frobnicate"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("frobnicate"));
}

#[test]
fn eval_checkpoint_writes_canonical_report() {
    let (dir, ckpt) = trained_fixture();
    let report = dir.join("report.csv");
    let out = nusg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "u2net-lite",
        "--data",
        dir.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
        "--size",
        "64",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,recall,precision,miou,mae,f1,params_mb,flops_g,inference_s"
    );
    let row = lines.next().unwrap();
    assert!(row.starts_with("u2net-lite,"));
    assert_eq!(row.split(',').count(), 9);
    // json mirror exists and parses
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(json["model"], "u2net-lite");
}

#[test]
fn eval_detects_checkpoint_arch_mismatch() {
    let (dir, ckpt) = trained_fixture();
    let out = nusg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "res-u2net-lite",
        "--data",
        dir.to_str().unwrap(),
        "--out",
        dir.join("r2.csv").to_str().unwrap(),
        "--size",
        "64",
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("res1.proj.weight"), "{}", stderr(&out));
}

#[test]
fn eval_bypass_reproduces_hand_counted_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("images")).unwrap();
    std::fs::create_dir_all(root.join("masks")).unwrap();
    std::fs::create_dir_all(root.join("preds")).unwrap();
    image::RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3]))
        .save(root.join("images/case.png"))
        .unwrap();
    // gt [[1,1],[0,0]]; pred probs ~[[0.90,0.40],[0.60,0.10]]
    write_gray_png(&root.join("masks/case.png"), 2, 2, &[255, 255, 0, 0]);
    write_gray_png(&root.join("preds/case.png"), 2, 2, &[229, 102, 153, 25]);
    let report = root.join("bypass.csv");
    let out = nusg(&[
        "eval",
        "--pred-dir",
        root.join("preds").to_str().unwrap(),
        "--data",
        root.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&report).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    // tp=1 fn=1 fp=1 tn=1 -> recall/precision/f1 50%, miou (1/3+1/3)/2
    assert_eq!(row[0], "bypass");
    assert!((row[1].parse::<f64>().unwrap() - 50.0).abs() < 1e-9);
    assert!((row[2].parse::<f64>().unwrap() - 50.0).abs() < 1e-9);
    assert!((row[3].parse::<f64>().unwrap() - 100.0 / 3.0).abs() < 1e-3);
    assert!((row[4].parse::<f64>().unwrap() - 0.35).abs() < 1e-5);
    assert!((row[5].parse::<f64>().unwrap() - 50.0).abs() < 1e-9);
}

#[test]
fn eval_requires_exactly_one_source() {
    let (dir, ckpt) = trained_fixture();
    let out = nusg(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "u2net-lite",
        "--pred-dir",
        dir.to_str().unwrap(),
        "--data",
        dir.to_str().unwrap(),
        "--out",
        dir.join("x.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn infer_writes_source_sized_deterministic_png() {
    let (dir, ckpt) = trained_fixture();
    let image_path = dir.join("images/eye0000.png");
    let out1 = dir.join("mask_a.png");
    let out2 = dir.join("mask_b.png");
    for out_path in [&out1, &out2] {
        let out = nusg(&[
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--arch",
            "u2net-lite",
            "--image",
            image_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--size",
            "64",
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let a = std::fs::read(&out1).unwrap();
    let b = std::fs::read(&out2).unwrap();
    assert_eq!(a, b, "inference is deterministic");
    let img = image::open(&out1).unwrap();
    assert_eq!((img.width(), img.height()), (80, 60), "source resolution restored");

    let thresholded = dir.join("mask_t.png");
    let out = nusg(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "u2net-lite",
        "--image",
        image_path.to_str().unwrap(),
        "--out",
        thresholded.to_str().unwrap(),
        "--size",
        "64",
        "--threshold",
        "0.5",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let gray = image::open(&thresholded).unwrap().to_luma8();
    assert!(gray.as_raw().iter().all(|&v| v == 0 || v == 255));
}

#[test]
fn infer_rejects_undecodable_input() {
    let (dir, ckpt) = trained_fixture();
    let bad = dir.join("not_an_image.png");
    std::fs::write(&bad, b"junk").unwrap();
    let out = nusg(&[
        "infer",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "u2net-lite",
        "--image",
        bad.to_str().unwrap(),
        "--out",
        dir.join("never.png").to_str().unwrap(),
        "--size",
        "64",
    ]);
    assert_eq!(code(&out), 1);
}

#[test]
fn gradcheck_reports_every_op_once_and_negative_control_fails() {
    let out = nusg(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    let expected = [
        "conv2d",
        "maxpool2d",
        "upsample_bilinear",
        "concat_channels",
        "relu",
        "sigmoid",
        "add",
        "scale",
        "mul_scalar",
        "mean",
        "batchnorm2d_train",
        "batchnorm2d_eval",
        "bce",
        "focal",
        "conv_bn_relu",
        "rsu4",
        "rsu4f",
        "res_connect",
        "deep_supervision_loss",
    ];
    let names: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split_whitespace().next())
        .collect();
    assert_eq!(names.len(), expected.len(), "{text}");
    for op in expected {
        assert_eq!(names.iter().filter(|&&n| n == op).count(), 1, "{op} listed once");
    }

    let out = nusg(&["gradcheck", "--include-negative-control"]);
    assert_eq!(code(&out), 1, "broken fixture must fail the run");
    assert!(stdout(&out).contains("broken_backward_fixture"));
}

#[test]
fn bench_validates_run_count_and_reports_median() {
    let (_, ckpt) = trained_fixture();
    let out = nusg(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "u2net-lite",
        "--runs",
        "1",
    ]);
    assert_eq!(code(&out), 2, "fewer than 5 timed runs is a usage error");

    let out = nusg(&[
        "bench",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--arch",
        "u2net-lite",
        "--runs",
        "5",
        "--warmup",
        "1",
        "--size",
        "64",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("median"), "{text}");
    assert!(text.contains("hardware:"), "{text}");
}

#[test]
fn thread_cap_does_not_change_inference_bytes() {
    let (dir, ckpt) = trained_fixture();
    let image_path = dir.join("images/eye0001.png");
    let out_default = dir.join("tc_default.png");
    let out_single = dir.join("tc_single.png");
    let run = |out_path: &Path, threads: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_nusg"));
        cmd.args([
            "infer",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--arch",
            "u2net-lite",
            "--image",
            image_path.to_str().unwrap(),
            "--out",
            out_path.to_str().unwrap(),
            "--size",
            "64",
        ]);
        if let Some(t) = threads {
            cmd.env("NUSG_THREADS", t);
        }
        let out = cmd.output().unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(&out_default, None);
    run(&out_single, Some("1"));
    assert_eq!(
        std::fs::read(&out_default).unwrap(),
        std::fs::read(&out_single).unwrap(),
        "results are bitwise identical at any worker count"
    );
}

#[test]
fn invalid_size_is_a_usage_error() {
    let out = nusg(&["summary", "--arch", "u2net-lite", "--size", "100"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--size"), "{}", stderr(&out));
}

#[test]
fn summary_full_model_budget_line() {
    // params are size-independent; a small probe size keeps the cost pass quick
    let out = nusg(&["summary", "--arch", "u2net", "--size", "64"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("parameters: 44009869 (167.88 MB"), "{text}");
}
