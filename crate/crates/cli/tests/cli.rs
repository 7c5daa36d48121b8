use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use n3f::dataset::{self, Dataset};
use n3f::synthscene::{desk_spec, RigConfig};

fn n3f(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_n3f")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = n3f(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small desk scene description: 6 training and 4 held-out views at 16×16.
fn write_small_spec(dir: &Path) -> PathBuf {
    let mut spec = desk_spec(0);
    spec.rig = RigConfig { train_views: 6, heldout_views: 4, width: 16, height: 16, ..RigConfig::default() };
    let path = dir.join("small.json");
    dataset::write_json(&path, &spec).unwrap();
    path
}

/// synth → train → render → eval → query → segment3d → edit → amodal; returns
/// every produced file in a fixed order.
fn pipeline(root: &Path, spec: &Path, seed: &str) -> Vec<(String, Vec<u8>)> {
    let data = root.join("data");
    let ckpt = root.join("model.n3fc");
    ok(&["synth", "--spec", s(spec), "--out", s(&data), "--seed", seed]);
    #[rustfmt::skip]
    ok(&[
        "train", "--data", s(&data), "--out", s(&ckpt), "--steps", "10", "--seed", seed,
        "--batch-rays", "64", "--samples", "8", "--layers", "2", "--width", "16", "--pos-freqs", "3", "--dir-freqs", "2",
    ]);
    let ds = Dataset::open(&data).unwrap();
    let (q, g) = (ds.split.query[0], ds.split.gallery[0]);
    let mask = ds.path(&dataset::mask_rel(1, q));
    let (qs, gs) = (q.to_string(), g.to_string());
    ok(&["render", "--ckpt", s(&ckpt), "--view", &gs, "--out-prefix", s(&root.join("r"))]);
    let out = ok(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--out", s(&root.join("eval.json"))]);
    assert!(out.starts_with("distilled scene mAP "), "{out}");
    let out = ok(&["eval", "--data", s(&data), "--teacher", "--out", s(&root.join("teacher.json"))]);
    assert!(out.starts_with("teacher scene mAP "), "{out}");
    #[rustfmt::skip]
    ok(&[
        "query", "--ckpt", s(&ckpt), "--data", s(&data), "--view", &qs, "--mask", s(&mask), "--tau", "0.5",
        "--target-view", &gs, "--out", s(&root.join("heat.png")),
    ]);
    let desc = ["--ckpt", s(&ckpt), "--desc-view", &qs, "--mask", s(&mask), "--tau-phi", "0.5"];
    let seg = root.join("seg.ply");
    ok(&[&["segment3d"], &desc[..], &["--tau-sigma", "1", "--res", "8", "--out", s(&seg)]].concat());
    ok(&[&["edit"], &desc[..], &["--view", &gs, "--out", s(&root.join("edit.png"))]].concat());
    ok(&[&["amodal"], &desc[..], &["--view", &gs, "--out", s(&root.join("amodal.png"))]].concat());

    let files = [
        "model.n3fc",
        "model.loss.csv",
        "r_rgb.png",
        "r_feat.n3fm",
        "r_depth.png",
        "r_acc.png",
        "eval.json",
        "eval.csv",
        "teacher.json",
        "heat.png",
        "heat_match.png",
        "heat.f32",
        "seg.ply",
        "edit.png",
        "amodal.png",
        "data/teacher/0000.n3fm",
    ];
    files.iter().map(|f| (f.to_string(), std::fs::read(root.join(f)).unwrap_or_else(|e| panic!("{f}: {e}")))).collect()
}

#[test]
fn smoke_pipeline_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write_small_spec(dir.path());
    let run = |name: &str, seed: &str| {
        let root = dir.path().join(name);
        std::fs::create_dir_all(&root).unwrap();
        pipeline(&root, &spec, seed)
    };
    let a = run("a", "5");
    let b = run("b", "5");
    for ((name, x), (_, y)) in a.iter().zip(&b) {
        assert!(x == y, "{name} differs between identical runs");
    }
    let c = run("c", "6");
    let differs = |f: &str| a.iter().zip(&c).any(|((n, x), (_, y))| n == f && x != y);
    assert!(differs("model.n3fc"));
    assert!(differs("data/teacher/0000.n3fm"));
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(n3f(&[]).status.code(), Some(2));
    assert_eq!(n3f(&["train"]).status.code(), Some(2));
    assert_eq!(n3f(&["synth", "--spec", "desk", "--out", "x", "--noise", "1,2"]).status.code(), Some(2));
    assert_eq!(n3f(&["eval", "--data", "d", "--teacher", "--ckpt", "c", "--out", "o"]).status.code(), Some(2));
    assert_eq!(n3f(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.n3fc");
    let out = n3f(&["render", "--ckpt", s(&missing), "--view", "0", "--out-prefix", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));

    let junk = dir.path().join("junk.n3fc");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let out = n3f(&["render", "--ckpt", s(&junk), "--view", "0", "--out-prefix", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(1));

    let out = n3f(&["synth", "--spec", s(&dir.path().join("missing.json")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_rejected() {
    let out = Command::new(env!("CARGO_BIN_EXE_n3f"))
        .args(["eval", "--data", "d", "--teacher", "--out", "o"])
        .env("N3F_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("N3F_THREADS"));
}
