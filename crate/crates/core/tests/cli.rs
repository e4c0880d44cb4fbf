use std::path::Path;
use std::process::{Command, Output};

fn mtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtl")).args(args).output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    mtl(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    assert_eq!(code(&[]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gen", "--out", p(&out), "--width", "abc"]), 1);
    assert_eq!(code(&["gen", "--out", p(&out), "--width", "4"]), 1);
    assert_eq!(code(&["train", "--out", p(&out), "--tasks", "colour"]), 1);
    assert_eq!(code(&["sweep", "--out", p(&out), "--grid", "1,x"]), 1);
    assert_eq!(code(&["eval", "--out", p(&out), "--pred", "/nonexistent", "--gt", "/nonexistent"]), 1);
    assert_eq!(code(&["segment", "--out", p(&out)]), 1);
    assert_eq!(code(&["gradcheck", "--points", "0"]), 1);

    let cfg = tmp.path().join("bad.kv");
    std::fs::write(&cfg, "no_such_key=3\n").unwrap();
    assert_eq!(code(&["train", "--out", p(&out), "--config", p(&cfg)]), 1);
    assert_eq!(code(&["train", "--out", p(&out), "--config", p(&tmp.path().join("missing.kv"))]), 1);
}

#[test]
fn divergence_exits_two_and_keeps_the_record() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = mtl(&[
        "train", "--out", p(&out), "--tasks", "depth:l2", "--mode", "unweighted", "--base-lr", "1e12",
        "--iters", "50", "--width", "16", "--height", "16", "--shapes-max", "2", "--min-separation", "6",
        "--min-instance-pixels", "12", "--scenes", "2",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged"));
    assert!(out.join("run.csv").exists());
}

#[test]
fn gen_then_segment_and_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let scene = tmp.path().join("scene");
    assert_eq!(code(&["gen", "--out", p(&scene), "--seed", "42"]), 0);
    for f in ["class.pgm", "instance.pgm", "depth.csv", "intensity.csv", "vecr.csv", "vecc.csv", "masks.csv", "meta.kv"] {
        assert!(scene.join(f).exists(), "{f}");
    }
    let seg = tmp.path().join("seg");
    assert_eq!(code(&["segment", "--out", p(&seg), "--scene", p(&scene)]), 0);
    let kv = std::fs::read_to_string(seg.join("segment.kv")).unwrap();
    assert!(kv.contains("partition_match=1\n"), "{kv}");

    let ev = tmp.path().join("eval");
    assert_eq!(code(&["eval", "--out", p(&ev), "--pred", p(&scene), "--gt", p(&scene)]), 0);
    let csv = std::fs::read_to_string(ev.join("metrics.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    let col = |name: &str| row[header.iter().position(|h| *h == name).unwrap()];
    assert_eq!(col("mean_iou"), "1");
    assert_eq!(col("depth_l1"), "0");
    assert_eq!(col("partition_match"), "1");
}

#[test]
fn flags_override_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.kv");
    std::fs::write(&cfg, "seed=1\nwidth=20\nheight=20\n").unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(code(&["gen", "--out", p(&a), "--config", p(&cfg), "--seed", "42", "--width", "32", "--height", "32"]), 0);
    assert_eq!(code(&["gen", "--out", p(&b), "--seed", "42"]), 0);
    for f in ["class.pgm", "depth.csv", "vecr.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_reports_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = mtl(&["gradcheck", "--points", "2", "--out", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("max relative gradient error"));
    assert!(tmp.path().join("gradcheck.kv").exists());
}
