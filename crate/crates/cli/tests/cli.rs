use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hicssm"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

const TINY: &str = "channels=2\nblocks_per_stage=1\nstate_size=2\nlefn_expansion=1\n";

#[test]
fn synth_is_reproducible_and_rejects_small_maps() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--n", "80", "--seed", "5", "--out", "a.coo"]);
    ok(d.path(), &["synth", "--n", "80", "--seed", "5", "--out", "b.coo"]);
    assert_eq!(
        fs::read(d.path().join("a.coo")).unwrap(),
        fs::read(d.path().join("b.coo")).unwrap()
    );
    let out = run(d.path(), &["synth", "--n", "39", "--out", "c.coo"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("c.coo").exists());
}

#[test]
fn preprocess_writes_archives_and_manifest() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--n", "120", "--out", "chr4.coo"]);
    let msg = ok(d.path(), &["preprocess", "--in", "chr4.coo", "--out-dir", "prep"]);
    assert!(msg.contains("9 patch pairs"), "{msg}");
    let manifest = fs::read_to_string(d.path().join("prep/chr4.manifest")).unwrap();
    assert!(manifest.contains("ratio=0.0625\n"));
    assert!(manifest.contains("split=test\n"));
    assert!(d.path().join("prep/chr4.inputs.bin").exists());
    assert!(d.path().join("prep/chr4.targets.bin").exists());
}

#[test]
fn full_pipeline_runs() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.cfg"), TINY).unwrap();
    for (chrom, seed) in [("chr1", "1"), ("chr2", "2"), ("chr4", "3")] {
        let file = format!("{chrom}.coo");
        ok(p, &["synth", "--n", "80", "--seed", seed, "--out", &file]);
        ok(p, &["preprocess", "--in", &file, "--out-dir", "prep"]);
    }
    let msg = ok(
        p,
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--data",
            "prep",
            "--out",
            "m.ckpt",
            "--epochs",
            "2",
            "--batch-size",
            "2",
        ],
    );
    assert!(msg.contains("4 pairs (4 validation)"), "{msg}");
    let hist = fs::read_to_string(p.join("m.history.csv")).unwrap();
    assert_eq!(hist.lines().next(), Some("step,train_l1,val_l1"));
    assert_eq!(hist.lines().count(), 3);

    ok(
        p,
        &[
            "enhance",
            "--model",
            "m.ckpt",
            "--in",
            "chr4.coo",
            "--out",
            "chr4.enh.coo",
        ],
    );
    let table = ok(
        p,
        &[
            "evaluate",
            "--pred",
            "chr4.enh.coo",
            "--target",
            "chr4.coo",
            "--out",
            "r.csv",
            "--distance-out",
            "d.csv",
        ],
    );
    assert!(table.contains("ssim"));
    let dist = fs::read_to_string(p.join("d.csv")).unwrap();
    assert_eq!(dist.lines().next(), Some("distance_bins,pcc"));
    assert_eq!(dist.lines().count(), 81);
}

#[test]
fn evaluate_identical_maps() {
    let d = tempfile::tempdir().unwrap();
    ok(d.path(), &["synth", "--n", "40", "--out", "a.coo"]);
    let table = ok(d.path(), &["evaluate", "--pred", "a.coo", "--target", "a.coo"]);
    assert!(table.contains("ssim                   1.000000"), "{table}");
    assert!(table.contains("psnr                   inf"), "{table}");
}

#[test]
fn flops_prints_one_number() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["flops"]);
    let v: f64 = out.trim().parse().expect("a single number");
    assert!(v > 0.0);
    let bigger: f64 = ok(d.path(), &["flops", "--channels", "64"]).trim().parse().unwrap();
    assert!(bigger > v);
    let detail = ok(d.path(), &["flops", "--detail"]);
    assert_eq!(detail.lines().last().unwrap(), out.trim());
}

#[test]
fn erf_writes_a_grid() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    ok(
        d.path(),
        &[
            "erf",
            "--config",
            "tiny.cfg",
            "--baseline",
            "--samples",
            "1",
            "--out",
            "g.csv",
        ],
    );
    let grid = fs::read_to_string(d.path().join("g.csv")).unwrap();
    assert_eq!(grid.lines().count(), 40);
    assert!(grid.lines().all(|l| l.split(',').count() == 40));
}

#[test]
fn loopscore_reproduces_the_reference_table() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(
        d.path(),
        &[
            "loopscore",
            "--counts",
            "151,67,50,44",
            "--totals",
            "708,344",
            "--out",
            "s.csv",
        ],
    );
    for w in ["0.523", "0.477", "0.356", "0.644"] {
        assert!(out.contains(w), "{out}");
    }
    assert_eq!(fs::read_to_string(d.path().join("s.csv")).unwrap().lines().count(), 5);
    assert_eq!(
        run(d.path(), &["loopscore", "--counts", "1,2", "--totals", "3,4"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_precedence_and_errors() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("c.cfg"), "epochs=7\nlearning_rate=0.5\n").unwrap();
    let dump = ok(
        d.path(),
        &[
            "train",
            "--config",
            "c.cfg",
            "--set",
            "epochs=9",
            "--learning-rate",
            "0.25",
            "--data",
            "x",
            "--out",
            "y",
            "--dump-config",
        ],
    );
    assert!(dump.contains("epochs=9\n"), "{dump}");
    assert!(dump.contains("learning_rate=0.25\n"), "{dump}");
    let defaults = ok(d.path(), &["flops", "--config", "default", "--dump-config"]);
    assert!(defaults.contains("batch_size=64\n"));

    let out = run(d.path(), &["flops", "--set", "chanels=3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("chanels"));
    assert_eq!(
        run(d.path(), &["train", "--data", "missing", "--out", "m"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn diverging_training_exits_with_1() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    fs::write(p.join("tiny.cfg"), TINY).unwrap();
    ok(p, &["synth", "--n", "40", "--out", "chr1.coo"]);
    ok(p, &["preprocess", "--in", "chr1.coo", "--out-dir", "prep"]);
    let out = run(
        p,
        &[
            "train",
            "--config",
            "tiny.cfg",
            "--data",
            "prep",
            "--out",
            "m.ckpt",
            "--epochs",
            "3",
            "--batch-size",
            "1",
            "--learning-rate",
            "1e300",
        ],
    );
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}
