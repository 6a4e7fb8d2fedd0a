use std::path::Path;
use std::process::{Command, Output};

fn semstereo(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semstereo"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

#[test]
fn generate_train_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let tiny = ["--c", "1", "--n-classes", "3", "--synth-height", "32", "--synth-width", "64"];

    let o = semstereo(d, &[&["gen-data", "--root", "data", "--count", "2"][..], &tiny].concat());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("data/train/disp/000001.png").exists());

    let o = semstereo(
        d,
        &[&["train", "--data-root", "data", "--steps", "2", "--crop-height", "32", "--crop-width", "64", "--out-dir", "run"][..], &tiny].concat(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("run/final.ckpt").exists() && d.join("run/config.txt").exists());

    let o = semstereo(d, &["eval", "--checkpoint", "run/final.ckpt", "--data-root", "data", "--val-split", "train", "--out-dir", "ev"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(d.join("ev/eval.txt")).unwrap();
    assert!(text.contains("stage3.epe = ") && text.contains("pairs = 2"), "{text}");
    assert_eq!(std::fs::read_to_string(d.join("ev/eval.tsv")).unwrap().lines().count(), 4);

    let o = semstereo(
        d,
        &["infer", "--checkpoint", "run/final.ckpt", "--left", "data/train/left/000000.png", "--right", "data/train/right/000000.png", "--stage-stop", "2", "--out-dir", "inf"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("inf/stage2_disparity.png").exists() && d.join("inf/stage2_classes.png").exists());
    assert!(!d.join("inf/stage3_disparity.png").exists());
}

#[test]
fn bench_reports_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = semstereo(dir.path(), &["bench", "--c", "1", "--height", "32", "--width", "64", "--reps", "5", "--out-dir", "b"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tsv = std::fs::read_to_string(dir.path().join("b/bench.tsv")).unwrap();
    assert!(tsv.starts_with("component\tmedian_ms\tp95_ms"));
    assert!(tsv.contains("stage3.total"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&semstereo(d, &["frobnicate"])), 1);
    assert_eq!(code(&semstereo(d, &["train", "--lr", "fast"])), 1);
    assert_eq!(code(&semstereo(d, &["eval", "--checkpoint", "missing.ckpt"])), 2);
    std::fs::write(d.join("junk.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&semstereo(d, &["eval", "--checkpoint", "junk.ckpt"])), 2);
    assert_eq!(code(&semstereo(d, &["--help"])), 0);
    let diverge = [
        "train", "--c", "1", "--n-classes", "3", "--synth-count", "2", "--synth-height", "32", "--synth-width", "64",
        "--crop-height", "32", "--crop-width", "64", "--steps", "6", "--lr", "1e12", "--out-dir", "run",
    ];
    assert_eq!(code(&semstereo(d, &diverge)), 3);
}
