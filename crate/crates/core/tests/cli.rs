use std::path::Path;
use std::process::{Command, Output};

fn tdet(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tdet"))
        .args(args)
        .current_dir(dir)
        .env("TDET_THREADS", "1")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = tdet(dir, args);
    assert!(
        out.status.success(),
        "tdet {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_writes_every_artifact() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("scene.json"), r#"{"scene": {"frames": 20}, "videos": 2}"#).unwrap();

    let msg = ok(dir, &["gen", "--config", "scene.json", "--out", "data", "--seed", "3"]);
    assert!(msg.contains("2 videos"));
    for f in ["dataset.json", "manifest.json", "seq_000/frame_00019.ppm", "seq_000/gt/gt.txt"] {
        assert!(dir.join("data").join(f).is_file(), "missing {f}");
    }

    ok(dir, &["split", "--data", "data", "--out", "split"]);
    assert!(dir.join("split/train/seq_001/frame_00015.ppm").is_file());
    assert!(!dir.join("split/train/seq_001/frame_00016.ppm").exists());
    assert!(dir.join("split/test/seq_001/frame_00003.ppm").is_file());

    ok(
        dir,
        &[
            "train",
            "--data",
            "split/train",
            "--segment",
            "all",
            "--out",
            "run",
            "--epochs",
            "2",
            "--seq-len",
            "3",
            "--pretrain-epochs",
            "1",
            "--samples-per-video",
            "4",
        ],
    );
    for f in [
        "config.json",
        "loss.csv",
        "pretrain_loss.csv",
        "base.ckpt",
        "epoch_01.ckpt",
        "epoch_02.ckpt",
        "best.ckpt",
        "train_summary.json",
        "manifest.json",
    ] {
        assert!(dir.join("run").join(f).is_file(), "missing run/{f}");
    }
    let loss = std::fs::read_to_string(dir.join("run/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("epoch,step,loss"));
    assert_eq!(loss.lines().count(), 1 + 2 * 2 * 4);

    ok(
        dir,
        &["eval", "--model", "run/best.ckpt", "--data", "split/test", "--segment", "all", "--mode", "sequenced", "--report", "seq"],
    );
    ok(
        dir,
        &["eval", "--model", "run/base.ckpt", "--data", "split/test", "--segment", "all", "--mode", "plain", "--report", "base"],
    );
    for f in ["report.json", "curve_all.csv", "curve_hidden.csv", "curve_visible.csv", "proneness.csv"] {
        assert!(dir.join("seq").join(f).is_file(), "missing seq/{f}");
    }

    let table = ok(dir, &["compare", "seq", "base", "--out", "cmp"]);
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("seq (sequenced)") && table.contains("base (plain)"));
    for f in ["pr_all.svg", "pr_hidden.svg", "pr_visible.svg", "proneness.svg", "ap_table.txt"] {
        assert!(dir.join("cmp").join(f).is_file(), "missing cmp/{f}");
    }

    ok(dir, &["plot", "--report", "seq"]);
    assert!(dir.join("seq/pr_all.svg").is_file());
}

#[test]
fn base_checkpoints_evaluate_like_their_transfer() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("scene.json"), r#"{"scene": {"frames": 10}, "videos": 1}"#).unwrap();
    ok(dir, &["gen", "--config", "scene.json", "--out", "data"]);
    ok(
        dir,
        &["train", "--data", "data", "--out", "run", "--epochs", "1", "--seq-len", "2", "--pretrain-epochs", "1", "--samples-per-video", "1"],
    );
    // the transferred model before temporal training equals the base, so
    // plain and sequenced reports of the base checkpoint coincide
    for mode in ["plain", "sequenced"] {
        ok(
            dir,
            &["eval", "--model", "run/base.ckpt", "--data", "data", "--segment", "all", "--mode", mode, "--report", mode],
        );
    }
    let a = std::fs::read_to_string(dir.join("plain/curve_all.csv")).unwrap();
    let b = std::fs::read_to_string(dir.join("sequenced/curve_all.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn thread_count_does_not_change_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("scene.json"), r#"{"scene": {"frames": 10}, "videos": 3}"#).unwrap();
    ok(dir, &["gen", "--config", "scene.json", "--out", "data"]);
    ok(
        dir,
        &["train", "--data", "data", "--out", "run", "--epochs", "1", "--seq-len", "3", "--pretrain-epochs", "1", "--samples-per-video", "2"],
    );
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let out = Command::new(env!("CARGO_BIN_EXE_tdet"))
            .args(["eval", "--model", "run/best.ckpt", "--data", "data", "--segment", "all", "--mode", "sequenced"])
            .args(["--report", threads])
            .current_dir(dir)
            .env("TDET_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        reports.push(std::fs::read_to_string(dir.join(threads).join("curve_all.csv")).unwrap());
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(tdet(dir, &["train", "--data", "x"]).status.code(), Some(1));
    assert_eq!(tdet(dir, &["gen", "--out", "d", "--unknown"]).status.code(), Some(1));
    assert_eq!(tdet(dir, &["eval", "--model", "m.ckpt", "--data", "d", "--mode", "plain", "--report", "r"]).status.code(), Some(2));
    assert_eq!(tdet(dir, &["compare", "a", "b"]).status.code(), Some(2));
    let help = tdet(dir, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("compare"));
    let threads = Command::new(env!("CARGO_BIN_EXE_tdet"))
        .args(["plot", "--report", "r"])
        .current_dir(dir)
        .env("TDET_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(threads.status.code(), Some(1));
}
