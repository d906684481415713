use std::path::Path;
use std::process::{Command, Output};

use ldrpm_core::dataset;
use ldrpm_core::model::checkpoint;

const TINY: &str = "input_length = 1024
stem_channels = 4
stem_kernel = 3
stem_stride = 2
stage_channels = 8
kernel_sizes = 3, 5
pool_stride = 8
model_dim = 8
depth = 1
ffn_expansion = 2
heads = 2
epochs = 2
seed = 4
";

fn ldrpm(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ldrpm")).args(args).output().expect("spawn ldrpm");
    assert!(
        out.status.success(),
        "ldrpm {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn same_tree(a: &Path, b: &Path, skip: &[&str]) {
    let names = |d: &Path| {
        let mut v: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .filter(|n| !skip.contains(&n.as_str()))
            .collect();
        v.sort();
        v
    };
    let (na, nb) = (names(a), names(b));
    assert_eq!(na, nb);
    for n in &na {
        assert!(read(&a.join(n)) == read(&b.join(n)), "{n} differs");
    }
}

#[test]
fn end_to_end_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();

    let (d1, d2) = (root.join("data1"), root.join("data2"));
    ldrpm(&["gen-data", "--seed", "3", "--input-length", "1024", "--out", p(&d1)]);
    ldrpm(&["gen-data", "--seed", "3", "--input-length", "1024", "--out", p(&d2)]);
    same_tree(&d1, &d2, &["run_manifest.txt"]);
    let set = dataset::load(&d1).unwrap();
    assert_eq!(set.len(), 1212);
    assert_eq!(set.split_sizes(), (845, 245, 122));

    let (r1, r2) = (root.join("run1"), root.join("run2"));
    for r in [&r1, &r2] {
        ldrpm(&["train", "--data", p(&d1), "--config", p(&cfg), "--timing-passes", "1", "--out", p(r)]);
    }
    for f in ["trace.csv", "weights.bin", "confusion.csv"] {
        assert!(read(&r1.join(f)) == read(&r2.join(f)), "{f} differs between runs");
    }
    let trace = String::from_utf8(read(&r1.join("trace.csv"))).unwrap();
    assert_eq!(trace.lines().count(), 3);
    assert_eq!(trace.lines().next(), Some("epoch,train_loss,val_acc"));
    let manifest = String::from_utf8(read(&r1.join("run_manifest.txt"))).unwrap();
    assert!(manifest.contains("command = train") && manifest.contains("seed = 4"));

    let net = checkpoint::load(&r1.join("weights.bin")).unwrap();
    let resaved = root.join("resaved.bin");
    checkpoint::save(&net, &resaved).unwrap();
    assert!(read(&resaved) == read(&r1.join("weights.bin")));

    let ev = root.join("eval");
    ldrpm(&[
        "eval",
        "--weights",
        p(&r1.join("weights.bin")),
        "--data",
        p(&d1),
        "--timing-passes",
        "0",
        "--out",
        p(&ev),
    ]);
    assert!(read(&ev.join("confusion.csv")) == read(&r1.join("confusion.csv")));
    let metric = |dir: &Path, key: &str| -> String {
        String::from_utf8(read(&dir.join("metrics.csv")))
            .unwrap()
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key},")).map(str::to_string))
            .unwrap()
    };
    for key in ["accuracy", "precision", "recall", "f1", "samples"] {
        assert_eq!(metric(&ev, key), metric(&r1, key));
    }

    let occupied = Command::new(env!("CARGO_BIN_EXE_ldrpm"))
        .args(["gen-data", "--seed", "3", "--input-length", "1024", "--out", p(&d1)])
        .output()
        .unwrap();
    assert_eq!(occupied.status.code(), Some(2));
}

#[test]
fn count_reports_every_variant() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("count.csv");
    let out = ldrpm(&["count", "--model", "cnt", "--csv", p(&csv)]);
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("model: cnt"));
    let text = String::from_utf8(read(&csv)).unwrap();
    assert!(text.starts_with("layer,params,flops\n"));
    for model in ["cnt-mdsc", "cnt-bsa", "ld-rpmnet"] {
        ldrpm(&["count", "--model", model]);
    }
}

#[test]
fn bad_config_is_a_runtime_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "batch_sise = 16\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ldrpm")).args(["count", "--config", p(&cfg)]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("batch_sise") && err.contains('1'), "{err}");
}

#[test]
fn every_subcommand_documents_its_flags() {
    for sub in ["gen-data", "train", "eval", "count", "gradcheck", "ablate"] {
        let out = ldrpm(&[sub, "--help"]);
        assert!(String::from_utf8(out.stdout).unwrap().contains("Usage"));
    }
}
