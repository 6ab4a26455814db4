use std::path::Path;
use std::process::{Command, Output};

use chit_core::io::{read_pfm, read_scene_dir};

fn chit(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chit"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("chit runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "train.steps=3\ntrain.scenes=2\n";

#[test]
fn render_writes_a_readable_scene() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("r.cfg"), "render.kind=fronto\nrender.depth=8\n").unwrap();
    let out = chit(&["render-synthetic", "--config", "r.cfg", "--out", "s"], dir.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let scene = read_scene_dir(&dir.path().join("s")).unwrap();
    assert_eq!(scene.left.shape(), &[3, 64, 64]);
    assert_eq!(scene.rig.baseline, 0.54);
    assert!(scene.depth_left.data().iter().all(|&z| (z - 8.0).abs() < 1e-5));
}

#[test]
fn train_is_deterministic_and_feeds_eval_and_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(p.join("t.cfg"), TINY).unwrap();
    std::fs::write(p.join("r.cfg"), "render.kind=two-plane\nrender.count=2\n").unwrap();
    for run in ["a", "b"] {
        let out = chit(&["train", "--config", "t.cfg", "--out", run, "--log-every", "0"], p);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    let read = |f: &str| std::fs::read(p.join(f)).unwrap();
    assert_eq!(read("a/loss_curve.txt"), read("b/loss_curve.txt"));
    assert_eq!(read("a/checkpoint.chit"), read("b/checkpoint.chit"));
    let curve = String::from_utf8(read("a/loss_curve.txt")).unwrap();
    assert_eq!(curve.lines().filter(|l| !l.starts_with('#')).count(), 3);

    // resuming a finished run changes nothing
    let out = chit(&["train", "--config", "t.cfg", "--out", "a", "--resume"], p);
    assert_eq!(code(&out), 0);
    assert_eq!(read("a/checkpoint.chit"), read("b/checkpoint.chit"));
    // but not under a different config
    std::fs::write(p.join("other.cfg"), "train.steps=3\ntrain.scenes=2\ntrain.seed=9\n").unwrap();
    assert_eq!(
        code(&chit(&["train", "--config", "other.cfg", "--out", "a", "--resume"], p)),
        1
    );

    assert_eq!(
        code(&chit(&["render-synthetic", "--config", "r.cfg", "--out", "scenes"], p)),
        0
    );
    let out = chit(&["eval", "--ckpt", "a/checkpoint.chit", "--scenes", "scenes"], p);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    let value = |key: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(&format!("{key}="))).unwrap();
        line.split_once('=').unwrap().1.parse().unwrap()
    };
    assert!(value("abs_rel").is_finite());
    assert!(value("delta1") <= value("delta2") && value("delta2") <= value("delta3"));
    assert_eq!(value("pixels"), 2.0 * 64.0 * 64.0);

    let out = chit(
        &[
            "inspect-attention",
            "--ckpt",
            "a/checkpoint.chit",
            "--scene",
            "scenes/scene000",
            "--layer",
            "1",
            "--head",
            "1",
            "--out",
            "attn.pfm",
        ],
        p,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let attn = read_pfm(&p.join("attn.pfm")).unwrap();
    assert_eq!(attn.shape(), &[65, 65]);
    for row in attn.data().chunks(65) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
    let heat = read_pfm(&p.join("attn.heat.pfm")).unwrap();
    assert_eq!(heat.shape(), &[8, 8]);
    assert!(heat.data().iter().all(|&h| h > 0.0 && h <= 1.0));

    let bad_layer = chit(
        &[
            "inspect-attention",
            "--ckpt",
            "a/checkpoint.chit",
            "--scene",
            "scenes/scene000",
            "--layer",
            "7",
            "--head",
            "0",
            "--out",
            "x.pfm",
        ],
        p,
    );
    assert_eq!(code(&bad_layer), 1);
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    assert_eq!(code(&chit(&["frobnicate"], p)), 1);
    assert_eq!(code(&chit(&["train", "--config", "missing.cfg"], p)), 1);
    assert_eq!(code(&chit(&["train", "--config", "missing.cfg", "--out", "o"], p)), 1);
    std::fs::write(p.join("bad.cfg"), "train.steps=3\ntrain.colour=blue\n").unwrap();
    let out = chit(&["train", "--config", "bad.cfg", "--out", "o"], p);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.colour"));
    assert_eq!(code(&chit(&["eval", "--ckpt", "nope.chit", "--scenes", "."], p)), 1);
    assert_eq!(code(&chit(&["--help"], p)), 0);
}

#[test]
fn grad_check_passes_on_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = chit(&["grad-check", "--seed", "1"], dir.path());
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    assert!(text.lines().filter(|l| l.ends_with("PASS")).count() > 50);
    assert!(!text.contains("FAIL"));
}
