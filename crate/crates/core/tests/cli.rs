use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
grid.nx = 16
grid.ny = 16
geometry.angles = 24
geometry.detectors = 32
geometry.source_distance = 100
geometry.detector_distance = 100
data.count = 4
net.c1 = 4
net.c2 = 8
net.groups = 2
net.k_iters = 2
train.epochs = 1
train.batch_size = 2
adapt.steps = 3
infer.samples = 2
tv.iters = 20
tv.tune_count = 2
";

fn bdgd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bdgd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn bdgd")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let o = bdgd(dir, args);
    assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("tiny.cfg"), TINY).unwrap();
    dir
}

#[test]
fn gen_data_is_byte_identical_on_rerun() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["gen-data", "--config", "tiny.cfg", "--seed", "7", "--out", "a"]);
    ok(
        p,
        &[
            "gen-data",
            "--config",
            "tiny.cfg",
            "--seed",
            "7",
            "--out",
            "b",
            "--threads",
            "1",
        ],
    );
    let a = std::fs::read(p.join("a/dataset.bds")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b/dataset.bds")).unwrap());
    ok(p, &["gen-data", "--config", "tiny.cfg", "--seed", "8", "--out", "c"]);
    assert_ne!(a, std::fs::read(p.join("c/dataset.bds")).unwrap());
}

#[test]
fn pipeline_runs_and_mismatched_geometry_exits_2() {
    let dir = setup();
    let p = dir.path();
    ok(p, &["gen-data", "--config", "tiny.cfg", "--seed", "1", "--out", "d"]);
    ok(
        p,
        &[
            "gen-data",
            "--config",
            "tiny.cfg",
            "--seed",
            "2",
            "--out",
            "d",
            "--file",
            "ood.bds",
            "--set",
            "data.kind=unsupervised-ood",
            "--set",
            "data.count=2",
        ],
    );
    ok(
        p,
        &["train", "--config", "tiny.cfg", "--data", "d/dataset.bds", "--out", "t"],
    );
    ok(
        p,
        &[
            "adapt",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "t/checkpoint.ck",
            "--data",
            "d/ood.bds",
            "--out",
            "a",
        ],
    );
    assert!(p.join("a/adapted_0001.ck").exists());
    let log = std::fs::read_to_string(p.join("a/adapt.log")).unwrap();
    assert_eq!(log.lines().count(), 2 * 4);
    assert!(log.lines().all(|l| l.starts_with("phase=ukt ")));

    ok(
        p,
        &[
            "reconstruct",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "t/checkpoint.ck",
            "--data",
            "d/dataset.bds",
            "--out",
            "r",
        ],
    );
    ok(
        p,
        &[
            "reconstruct",
            "--config",
            "tiny.cfg",
            "--checkpoint",
            "a/adapted_0000.ck",
            "a/adapted_0001.ck",
            "--data",
            "d/ood.bds",
            "--out",
            "r",
        ],
    );
    ok(
        p,
        &[
            "baseline",
            "--config",
            "tiny.cfg",
            "--method",
            "fbp",
            "--data",
            "d/dataset.bds",
            "--out",
            "r",
        ],
    );
    ok(
        p,
        &[
            "baseline",
            "--config",
            "tiny.cfg",
            "--method",
            "tv",
            "--data",
            "d/dataset.bds",
            "--out",
            "r",
        ],
    );
    let csv = std::fs::read_to_string(p.join("r/metrics.csv")).unwrap();
    // ground truth exists only for the supervised records
    assert_eq!(csv.lines().count(), 1 + 3 * 4);
    assert!(csv
        .lines()
        .skip(1)
        .all(|l| l.split(',').count() == 7 && l.split(',').nth(4) == Some("0")));
    for f in [
        "bdgd_0000.pgm",
        "bdgd_0000_epistemic.tnsr",
        "bdgd_0001_total.pgm",
        "tv_0003.tnsr",
        "fbp_0000.pgm",
    ] {
        assert!(p.join("r").join(f).exists(), "{f}");
    }

    let o = bdgd(
        p,
        &[
            "reconstruct",
            "--checkpoint",
            "t/checkpoint.ck",
            "--data",
            "d/dataset.bds",
            "--out",
            "x",
        ],
    );
    assert_eq!(o.status.code(), Some(2));
    let msg = stderr(&o);
    assert_eq!(msg.trim_end().lines().count(), 1, "{msg}");
    assert!(
        msg.contains("checkpoint geometry") && msg.contains("configured geometry"),
        "{msg}"
    );
}

#[test]
fn eval_of_identical_tensors() {
    let dir = setup();
    let p = dir.path();
    let img: Vec<f64> = (0..256).map(|i| (i % 16) as f64 / 15.0).collect();
    bdgd::formats::write_tensor_file(&p.join("a.tnsr"), &[16, 16], &img).unwrap();
    let out = ok(
        p,
        &[
            "eval", "--pred", "a.tnsr", "--ref", "a.tnsr", "--range", "auto", "--out", "e",
        ],
    );
    let f: Vec<&str> = out.trim().split(',').collect();
    assert_eq!(f[2], "99.000000");
    assert_eq!(f[3], "1.000000");
    assert!(std::fs::read_to_string(p.join("e/metrics.csv"))
        .unwrap()
        .starts_with("sample_id,method,psnr_db"));
}

#[test]
fn usage_and_data_errors() {
    let dir = setup();
    let p = dir.path();
    for args in [
        &["frobnicate"][..],
        &["train"],
        &["gen-data", "--set", "grid.nz=3"],
        &["gen-data", "--set", "grid.nx=0"],
        &["gen-data", "--threads", "0"],
        &["eval", "--pred", "a", "--ref", "a", "--range", "-1"],
    ] {
        let o = bdgd(p, args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", stderr(&o));
        assert_eq!(stderr(&o).trim_end().lines().count(), 1, "{args:?}: {}", stderr(&o));
    }
    std::fs::write(p.join("junk.bds"), b"not a dataset").unwrap();
    let o = bdgd(p, &["train", "--config", "tiny.cfg", "--data", "junk.bds"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = bdgd(p, &["train", "--config", "tiny.cfg", "--data", "missing.bds"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_lists_every_key() {
    let dir = setup();
    let help = ok(dir.path(), &["--help"]);
    for k in bdgd::cli::KEYS {
        assert!(help.contains(&format!("{} = {}", k.key, k.default)), "{}", k.key);
    }
}
