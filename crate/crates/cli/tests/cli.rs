use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn misr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_misr")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, out: &str, seed: &str) {
    let o = misr(&["synth", "--out", out, "--count", "3", "--lr-size", "12", "--frames", "5", "--seed", seed], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--data", "data", "--out", out, "--epochs", "1", "--k", "4", "--crop", "8", "--batch-size", "2"];
    args.extend_from_slice(extra);
    misr(&args, dir)
}

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_per_seed() {
    let tmp = TempDir::new().unwrap();
    synth(tmp.path(), "a", "5");
    synth(tmp.path(), "b", "5");
    synth(tmp.path(), "c", "6");
    let a = tree(&tmp.path().join("a"));
    assert!(a.iter().any(|(n, _)| n.ends_with("HR.png")));
    assert_eq!(a, tree(&tmp.path().join("b")));
    assert_ne!(a, tree(&tmp.path().join("c")));
}

#[test]
fn train_writes_outputs_and_snapshot_reproduces_the_run() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "1");
    let o = train(dir, "run", &["--shuffle-t", "6"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["last.ckpt", "history.csv", "config.resolved"] {
        assert!(dir.join("run").join(f).exists(), "{f} missing");
    }
    let snapshot = fs::read_to_string(dir.join("run/config.resolved")).unwrap();
    assert!(snapshot.lines().any(|l| l == "shuffle_t = 6"), "{snapshot}");

    // Feeding the snapshot back (with a new output directory) repeats the run bit for bit.
    let o = misr(&["train", "--config", "run/config.resolved", "--out", "again"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read(dir.join("run/last.ckpt")).unwrap(), fs::read(dir.join("again/last.ckpt")).unwrap());
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "1");
    let o = train(dir, "run", &["--set", "train.epoch=3"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("train.epoch"), "{}", stderr(&o));
    fs::write(dir.join("bad.cfg"), "[model]\nwidth = 3\n").unwrap();
    let o = misr(&["train", "--config", "bad.cfg", "--data", "data"], dir);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("model.width"), "{}", stderr(&o));
    assert_eq!(code(&train(dir, "run", &["--no-such-flag"])), 2);
    assert_eq!(code(&misr(&["eval", "--data", "data"], dir)), 2);
}

#[test]
fn command_line_overrides_config_file() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "1");
    fs::write(dir.join("a.cfg"), "[train]\nepochs = 0\nlr = 0.002\n").unwrap();
    let o = train(dir, "run", &["--config", "a.cfg"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let snapshot = fs::read_to_string(dir.join("run/config.resolved")).unwrap();
    assert!(snapshot.contains("epochs = 1\n") && snapshot.contains("lr = 0.002\n"), "{snapshot}");
}

#[test]
fn eval_reports_and_flags_missing_targets() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "2");
    let o = misr(&["train", "--data", "data", "--out", "run", "--epochs", "0", "--k", "4", "--crop", "8"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let o = misr(&["eval", "--data", "data", "--checkpoint", "run/last.ckpt", "--out", "ev"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(dir.join("ev/report.jsonl")).unwrap();
    assert_eq!(report.lines().count(), 3 + 1);
    assert!(report.lines().last().unwrap().starts_with("{\"summary\""));

    let o = misr(&["eval", "--data", "data", "--baseline", "bicubic", "--out", "bl"], dir);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("scored 3"));

    for s in ["imgset0000", "imgset0001", "imgset0002"] {
        fs::remove_file(dir.join("data/NIR").join(s).join("HR.png")).unwrap();
        fs::remove_file(dir.join("data/NIR").join(s).join("SM.png")).unwrap();
    }
    let o = misr(&["eval", "--data", "data", "--baseline", "bicubic", "--out", "bl"], dir);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert_eq!(code(&misr(&["eval", "--data", "missing", "--baseline", "bicubic"], dir)), 3);
}

#[test]
fn infer_writes_deterministic_upscaled_png() {
    let tmp = TempDir::new().unwrap();
    let dir = tmp.path();
    synth(dir, "data", "3");
    assert_eq!(code(&train(dir, "run", &[])), 0);
    let scene = dir.join("data/NIR/imgset0001");
    fs::remove_file(scene.join("HR.png")).unwrap();
    fs::remove_file(scene.join("SM.png")).unwrap();
    for out in ["a.png", "b.png"] {
        let o = misr(&["infer", "--checkpoint", "run/last.ckpt", "--scene", "data/NIR/imgset0001", "--output", out], dir);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let a = fs::read(dir.join("a.png")).unwrap();
    assert_eq!(a, fs::read(dir.join("b.png")).unwrap());
    let img = image::load_from_memory(&a).unwrap();
    assert_eq!((img.width(), img.height()), (36, 36));
    assert!(matches!(img, image::DynamicImage::ImageLuma16(_)));

    fs::create_dir(dir.join("empty")).unwrap();
    let o = misr(&["infer", "--checkpoint", "run/last.ckpt", "--scene", "empty", "--output", "c.png"], dir);
    assert_eq!(code(&o), 3);
}

#[test]
fn check_passes_and_catches_a_broken_gradient() {
    let tmp = TempDir::new().unwrap();
    let o = misr(&["check", "--instances", "3"], tmp.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let o = misr(&["check", "--instances", "2", "--fault", "gelu"], tmp.path());
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("grad/gelu"), "{}", stderr(&o));
}
