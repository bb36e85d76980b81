mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Output;

use common::{bin, path_str as s, snapshot, TINY_CONFIG as TINY};

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["gen-data", "--videos", "3", "--frames", "40", "--classes", "2", "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn gen_data_is_deterministic_and_validates() {
    let tmp = tempfile::tempdir().unwrap();
    let a = gen(tmp.path(), "a", "7");
    let b = gen(tmp.path(), "b", "7");
    let snap = snapshot(&a);
    assert_eq!(snap, snapshot(&b));
    assert_eq!(fs::read_to_string(a.join("index")).unwrap().lines().count(), 3);
    let c = gen(tmp.path(), "c", "8");
    assert_ne!(snap, snapshot(&c));

    let out = run(&["gen-data", "--classes", "99", "--out", s(&tmp.path().join("bad"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_eval_infer_are_byte_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(root, "data", "3");
    let cfg = root.join("run.cfg");
    fs::write(&cfg, TINY).unwrap();

    let mut snaps = Vec::new();
    for k in 0..2 {
        let run_dir = root.join(format!("run{k}"));
        ok(&["train", "--config", s(&cfg), "--seed", "5", "--out", s(&run_dir)]);
        let model = run_dir.join("model");
        let ev = root.join(format!("eval{k}"));
        ok(&["eval", "--checkpoint", s(&model), "--config", s(&cfg), "--out", s(&ev)]);
        let inf = root.join(format!("infer{k}"));
        let video = root.join("data").join("video_001");
        ok(&["infer", "--checkpoint", s(&model), "--video", s(&video), "--task", "all", "--out", s(&inf)]);
        snaps.push((snapshot(&run_dir), snapshot(&ev), snapshot(&inf)));
    }
    assert_eq!(snaps[0], snaps[1]);

    let (train_files, eval_files, infer_files) = &snaps[0];
    let csv = String::from_utf8(train_files[Path::new("loss.csv")].clone()).unwrap();
    assert!(csv.starts_with("step,task,loss\n0,saliency,"));
    let report = String::from_utf8(eval_files[Path::new("report.tsv")].clone()).unwrap();
    for metric in ["cc", "nss", "auc_j", "accuracy", "fscore_max", "roc_auc"] {
        assert!(report.lines().any(|l| l.starts_with(&format!("{metric}\t"))), "{metric}");
    }

    let pred = String::from_utf8(infer_files[Path::new("action/prediction.txt")].clone()).unwrap();
    let total: f64 = pred
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-9, "{total}");

    let scores = String::from_utf8(infer_files[Path::new("summary/scores.tsv")].clone()).unwrap();
    let selected = scores.lines().skip(1).filter(|l| l.ends_with("\t1")).count();
    assert!(selected as f64 <= 0.15 * 40.0);
    let maps = infer_files.keys().filter(|p| p.starts_with("saliency") && p.extension().is_some_and(|e| e == "stsr"));
    assert_eq!(maps.count(), 40);
}

#[test]
fn zero_epoch_checkpoint_is_the_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    gen(root, "data", "3");
    let cfg = root.join("zero.cfg");
    fs::write(&cfg, TINY.replace("epochs=1", "epochs=0")).unwrap();
    ok(&["train", "--config", s(&cfg), "--seed", "11", "--out", s(&root.join("r"))]);
    let model = susinet::checkpoint::load_model(&root.join("r").join("model")).unwrap();
    let init = susinet::model::Susinet::new(model.config().clone(), 11).unwrap();
    assert_eq!(model.params(), init.params());
}

#[test]
fn validation_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = gen(root, "data", "3");

    let cfg = root.join("bad.cfg");
    fs::write(&cfg, format!("{TINY}learning_rate=0.1\n")).unwrap();
    let out = run(&["train", "--config", s(&cfg), "--out", s(&root.join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 14"));

    // Strip one record's importance and ask for the summary metrics.
    let meta = data.join("video_000").join("meta");
    let text = fs::read_to_string(&meta).unwrap().replace("importance=yes", "importance=no");
    fs::write(&meta, text).unwrap();
    let good = root.join("good.cfg");
    fs::write(&good, TINY).unwrap();
    ok(&["train", "--config", s(&good), "--task", "action", "--out", s(&root.join("r2"))]);
    let out = run(&[
        "eval",
        "--checkpoint",
        s(&root.join("r2").join("model")),
        "--data",
        s(&data),
        "--task",
        "summary",
        "--out",
        s(&root.join("e")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("video_000"));
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--instances", "3"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("0 failed"), "{text}");
}
