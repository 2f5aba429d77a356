use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ctsynth_core::volume::load_volume;

fn ctsynth(dir: &Path, args: &[&str]) -> Output {
    let log = dir.join("runs.log");
    Command::new(env!("CARGO_BIN_EXE_ctsynth"))
        .args(args)
        .args(["--run-log", log.to_str().unwrap()])
        .current_dir(dir)
        .output()
        .expect("spawn ctsynth")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert_eq!(code(&o), 0, "stdout:\n{}\nstderr:\n{}", stdout(&o), stderr(&o));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_files_and_manifest() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("ph");
    ok(ctsynth(t.path(), &["synth", "--count", "2", "--dims", "32,32,32", "--out-dir", p(&out), "--seed", "4"]));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("# seed 4"));
    assert_eq!(manifest.lines().filter(|l| l.ends_with(".ctv")).count(), 2);
    for n in ["phantom_000.ctv", "phantom_001.ctv"] {
        assert_eq!(load_volume(out.join(n)).unwrap().dims(), [32, 32, 32]);
        assert!(out.join(n.replace(".ctv", ".meta.json")).exists());
    }

    let again = t.path().join("ph2");
    ok(ctsynth(t.path(), &["synth", "--count", "2", "--dims", "32,32,32", "--out-dir", p(&again), "--seed", "4"]));
    for n in ["phantom_000.ctv", "phantom_001.ctv", "manifest.txt"] {
        assert_eq!(fs::read(out.join(n)).unwrap(), fs::read(again.join(n)).unwrap());
    }
}

#[test]
fn invalid_dims_is_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let o = ctsynth(t.path(), &["synth", "--dims", "0,32,32", "--out-dir", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dims"));
    // Below the phantom minimum.
    assert_eq!(code(&ctsynth(t.path(), &["synth", "--dims", "8", "--out-dir", "x"])), 2);
    // Unknown flags are usage errors too.
    assert_eq!(code(&ctsynth(t.path(), &["synth", "--bogus"])), 2);
}

#[test]
fn prep_auto_counts_pairs() {
    let t = tempfile::tempdir().unwrap();
    ok(ctsynth(t.path(), &["synth", "--dims", "64", "--out-dir", "ph"]));
    ok(ctsynth(t.path(), &["prep", "--in", "ph", "--out-dir", "pairs", "--edge", "32", "--condition", "auto"]));
    let manifest = fs::read_to_string(t.path().join("pairs/manifest.txt")).unwrap();
    assert_eq!(manifest.lines().filter(|l| !l.starts_with('#')).count(), 8 * 34);
    assert!(manifest.contains("# seed 0"));
    assert!(t.path().join("pairs/params/vol0.meta.json").exists());
}

fn pixel_cells_constant(v: &ctsynth_core::volume::Volume) -> bool {
    let [nx, ny, nz] = v.dims();
    (0..nz).all(|z| (0..ny).all(|y| (0..nx).all(|x| v.get(x, y, z) == v.get(x & !1, y & !1, z & !1))))
}

#[test]
fn prep_pixelated_and_reproducible() {
    let t = tempfile::tempdir().unwrap();
    ok(ctsynth(t.path(), &["synth", "--dims", "32", "--out-dir", "ph"]));
    for out in ["a", "b"] {
        ok(ctsynth(
            t.path(),
            &["prep", "--in", "ph/phantom_000.ctv", "--out-dir", out, "--edge", "16", "--condition", "pixelated", "--seed", "3"],
        ));
    }
    let manifest = fs::read_to_string(t.path().join("a/manifest.txt")).unwrap();
    assert!(manifest.contains("# seed 3"));
    let mut n = 0;
    for line in manifest.lines().filter(|l| !l.starts_with('#')) {
        let cond = line.split_whitespace().next().unwrap();
        assert!(pixel_cells_constant(&load_volume(t.path().join("a").join(cond)).unwrap()), "{cond}");
        assert_eq!(fs::read(t.path().join("a").join(cond)).unwrap(), fs::read(t.path().join("b").join(cond)).unwrap());
        n += 1;
    }
    assert_eq!(n, 8 * 34);
    assert_eq!(manifest, fs::read_to_string(t.path().join("b/manifest.txt")).unwrap());
}

#[test]
fn prep_unreadable_volume_is_io_error() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("bad.ctv"), b"XXXXgarbage").unwrap();
    let o = ctsynth(t.path(), &["prep", "--in", "bad.ctv", "--out-dir", "pairs"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

/// Tiny noisy pair set with edge-8 blocks.
fn tiny_pairs(dir: &Path) {
    ok(ctsynth(dir, &["synth", "--dims", "16", "--out-dir", "ph"]));
    ok(ctsynth(dir, &["prep", "--in", "ph", "--out-dir", "pairs", "--edge", "8", "--condition", "noisy", "--sample", "12"]));
}

const TINY_TRAIN: [&str; 9] = ["train", "--pairs", "pairs", "--batch", "4", "--base-channels", "2", "--threads", "1"];

#[test]
fn train_rejects_zero_epochs() {
    let t = tempfile::tempdir().unwrap();
    tiny_pairs(t.path());
    let o = ctsynth(t.path(), &[&TINY_TRAIN[..], &["--epochs", "0"]].concat());
    assert_eq!(code(&o), 2);
}

#[test]
fn train_is_deterministic_and_resumable() {
    let t = tempfile::tempdir().unwrap();
    tiny_pairs(t.path());
    for dir in ["full", "again"] {
        ok(ctsynth(t.path(), &[&TINY_TRAIN[..], &["--epochs", "4", "--ckpt-dir", dir, "--checkpoint-every", "2"]].concat()));
    }
    ok(ctsynth(t.path(), &[&TINY_TRAIN[..], &["--epochs", "2", "--ckpt-dir", "part", "--checkpoint-every", "2"]].concat()));
    ok(ctsynth(t.path(), &[&TINY_TRAIN[..], &["--epochs", "4", "--ckpt-dir", "part", "--resume", "part/latest.ckpt"]].concat()));
    let read = |d: &str, f: &str| fs::read(t.path().join(d).join(f)).unwrap();
    for f in ["loss.log", "latest.ckpt", "ckpt_epoch0004.ckpt"] {
        assert_eq!(read("full", f), read("again", f), "{f} differs between identical runs");
        assert_eq!(read("full", f), read("part", f), "{f} differs after resume");
    }
    assert_eq!(fs::read_to_string(t.path().join("full/loss.log")).unwrap().lines().count(), 4);

    // Inference on the trained generator.
    let gen = |out: &str, extra: &[&str]| {
        ctsynth(
            t.path(),
            &[&["generate", "--ckpt", "full/latest.ckpt", "--in", "ph/phantom_000.ctv", "--condition", "noisy", "--out", out], extra]
                .concat(),
        )
    };
    ok(gen("g1.ctv", &["--seed", "5"]));
    ok(gen("g2.ctv", &["--seed", "5"]));
    assert_eq!(load_volume(t.path().join("g1.ctv")).unwrap().dims(), [16, 16, 16]);
    assert_eq!(fs::read(t.path().join("g1.ctv")).unwrap(), fs::read(t.path().join("g2.ctv")).unwrap());
    let o = gen("g3.ctv", &["--edge", "32"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("shape mismatch"), "{}", stderr(&o));
}

#[test]
fn evaluate_identical_and_mismatched() {
    let t = tempfile::tempdir().unwrap();
    ok(ctsynth(t.path(), &["synth", "--count", "2", "--dims", "16,16,20", "--out-dir", "ph"]));
    let o = ok(ctsynth(t.path(), &["evaluate", "--real", "ph/phantom_000.ctv", "--generated", "ph/phantom_000.ctv"]));
    assert!(stdout(&o).contains("SSIM 1.0000"), "{}", stdout(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(t.path().join("ph/phantom_000.report.json")).unwrap()).unwrap();
    for key in ["psnr_db", "ssim", "per_slice"] {
        assert!(report.get(key).is_some(), "report lacks {key}");
    }
    assert_eq!(report["per_slice"].as_array().unwrap().len(), 20);

    ok(ctsynth(t.path(), &["synth", "--dims", "16", "--out-dir", "other"]));
    let o = ctsynth(t.path(), &["evaluate", "--real", "ph/phantom_000.ctv", "--generated", "other/phantom_000.ctv"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn blindtest_exports_and_rejects_too_many_pairs() {
    let t = tempfile::tempdir().unwrap();
    ok(ctsynth(t.path(), &["synth", "--count", "2", "--dims", "16", "--out-dir", "real", "--seed", "1"]));
    ok(ctsynth(t.path(), &["synth", "--count", "2", "--dims", "16", "--out-dir", "gen", "--seed", "2"]));
    ok(ctsynth(t.path(), &["blindtest", "--real-dir", "real", "--gen-dir", "gen", "--pairs", "20", "--out-dir", "bt"]));
    let pgm =
        fs::read_dir(t.path().join("bt")).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count();
    assert_eq!(pgm, 40);
    let key = fs::read_to_string(t.path().join("bt/answer_key.txt")).unwrap();
    assert_eq!(key.lines().filter(|l| l.starts_with("pair")).count(), 20);

    let o = ctsynth(t.path(), &["blindtest", "--real-dir", "real", "--gen-dir", "gen", "--pairs", "33", "--out-dir", "bt2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn gradcheck_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let o = ok(ctsynth(t.path(), &["gradcheck", "--skip-model"]));
    assert!(stdout(&o).contains("conv3d"));
    let o = ctsynth(t.path(), &["gradcheck", "--skip-model", "--corrupt-backward"]);
    assert_eq!(code(&o), 4);
    // A coarse step is judged against the scaled, looser threshold.
    let o = ok(ctsynth(t.path(), &["gradcheck", "--skip-model", "--h", "1e-2"]));
    assert!(stdout(&o).contains("5.0e-2"), "{}", stdout(&o));
}

#[test]
fn config_file_and_run_log() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("c.toml"), "seed = 9\n[synth]\ncount = 3\ndims = \"16\"\nout-dir = \"from_file\"\n").unwrap();
    ok(ctsynth(t.path(), &["synth", "--config", "c.toml", "--count", "1"]));
    let manifest = fs::read_to_string(t.path().join("from_file/manifest.txt")).unwrap();
    assert!(manifest.contains("# seed 9"));
    assert_eq!(manifest.lines().filter(|l| l.ends_with(".ctv")).count(), 1);

    let log = fs::read_to_string(t.path().join("runs.log")).unwrap();
    let line: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    assert_eq!(line["command"], "synth");
    assert_eq!(line["global"]["seed"], 9);
    assert_eq!(line["config"]["count"], 1);
    assert_eq!(line["config"]["dims"], serde_json::json!([16, 16, 16]));

    fs::write(t.path().join("bad.toml"), "[synth]\ncont = 3\n").unwrap();
    assert_eq!(code(&ctsynth(t.path(), &["synth", "--config", "bad.toml"])), 2);
}
