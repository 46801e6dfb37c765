use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vllve(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vllve"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = vllve(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Every file under `root`, keyed by relative path.
fn snapshot(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let key = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn log_without_times(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

const SMALL: [&str; 8] = [
    "--clips", "2", "--frames", "4", "--size", "16", "--seed", "3",
];

fn small_dataset(dir: &Path) {
    let mut args = vec!["synth"];
    args.extend(SMALL);
    args.extend(["--out", "data"]);
    ok(dir, &args);
}

const QUICK: [&str; 6] = ["--batch-size", "1", "--count", "64", "--t-neighbor", "2"];

#[test]
fn synth_writes_dataset_sidecar_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let data = dir.path().join("data");
    for f in [
        "warps.json",
        "run_manifest.json",
        "clip_000/low/00003.png",
        "clip_001/normal/00000.png",
    ] {
        assert!(data.join(f).is_file(), "missing {f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "synth");
    assert_eq!(manifest["seeds"]["synth"], 3);
    assert_eq!(manifest["config"]["synth"]["size"], 16);
}

#[test]
fn synth_is_bit_identical_and_replays_from_its_manifest() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let mut args = vec!["synth"];
    args.extend(SMALL);
    args.extend(["--out", "again"]);
    ok(dir.path(), &args);
    ok(
        dir.path(),
        &[
            "synth",
            "--config",
            "data/run_manifest.json",
            "--out",
            "replay",
        ],
    );
    let first = snapshot(&dir.path().join("data"));
    let strip = |mut s: BTreeMap<String, Vec<u8>>| {
        s.remove("run_manifest.json");
        s
    };
    assert_eq!(
        strip(first.clone()),
        strip(snapshot(&dir.path().join("again")))
    );
    assert_eq!(strip(first), strip(snapshot(&dir.path().join("replay"))));
}

#[test]
fn vllvepp_needs_a_pretrained_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = vllve(
        dir.path(),
        &[
            "train",
            "--variant",
            "vllvepp",
            "--dataset",
            "data",
            "--out",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert!(
        err.contains("--pretrained") && err.contains("trained vllve checkpoint"),
        "{err}"
    );
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = vllve(dir.path(), &["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
    assert_eq!(vllve(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(vllve(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(vllve(dir.path(), &["synth"]).status.code(), Some(2));
    assert_eq!(vllve(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(
        vllve(dir.path(), &["report", "--out", "r"]).status.code(),
        Some(2)
    );
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    fs::write(dir.path().join("typo.toml"), "[train]\nbatch_sise = 2\n").unwrap();
    let out = vllve(
        dir.path(),
        &[
            "train",
            "--config",
            "typo.toml",
            "--dataset",
            "data",
            "--out",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("batch_sise"), "{}", stderr(&out));

    fs::write(dir.path().join("zero.toml"), "[train]\nbatch_size = 0\n").unwrap();
    let out = vllve(
        dir.path(),
        &[
            "train",
            "--config",
            "zero.toml",
            "--dataset",
            "data",
            "--out",
            "run",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("batch_size"), "{}", stderr(&out));

    fs::write(dir.path().join("other.toml"), "command = \"eval\"\n").unwrap();
    let out = vllve(
        dir.path(),
        &["synth", "--config", "other.toml", "--out", "x"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_failures_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = vllve(
        dir.path(),
        &["train", "--dataset", "absent", "--out", "run"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("absent"), "{}", stderr(&out));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    fs::write(
        dir.path().join("run.toml"),
        "dataset = \"data\"\n[train]\nt_max = 3\nseed = 5\nbatch_size = 1\nt_neighbor = 2\n[train.provider]\ncount = 32\n",
    )
    .unwrap();
    ok(
        dir.path(),
        &[
            "train", "--config", "run.toml", "--t-max", "2", "--out", "run",
        ],
    );
    let log = log_without_times(&dir.path().join("run/train_log.jsonl"));
    assert_eq!(log.len(), 2);
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("run/run_manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["config"]["train"]["t_max"], 2);
    assert_eq!(manifest["config"]["train"]["seed"], 5);
    assert_eq!(manifest["config"]["train"]["provider"]["count"], 32);
    assert_eq!(manifest["seeds"]["train"], 5);
}

#[test]
fn full_pipeline_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);

    let mut args = vec![
        "train",
        "--dataset",
        "data",
        "--out",
        "base",
        "--t-max",
        "3",
    ];
    args.extend(QUICK);
    ok(d, &args);
    assert!(d.join("base/final.ckpt").is_file());

    ok(
        d,
        &[
            "train",
            "--config",
            "base/run_manifest.json",
            "--out",
            "base2",
        ],
    );
    assert_eq!(
        log_without_times(&d.join("base/train_log.jsonl")),
        log_without_times(&d.join("base2/train_log.jsonl"))
    );

    let mut args = vec![
        "train",
        "--variant",
        "vllvepp",
        "--pretrained",
        "base/final.ckpt",
        "--dataset",
        "data",
        "--out",
        "pp",
        "--t-max",
        "2",
    ];
    args.extend(QUICK);
    ok(d, &args);

    ok(
        d,
        &[
            "infer",
            "--checkpoint",
            "pp/final.ckpt",
            "--dataset",
            "data",
            "--out",
            "enh",
            "--save-decomposition",
        ],
    );
    for part in ["enhanced", "l", "r", "b"] {
        assert!(
            d.join("enh/clip_001")
                .join(part)
                .join("00003.png")
                .is_file(),
            "{part}"
        );
    }

    let report = ok(
        d,
        &[
            "eval",
            "--dataset",
            "data",
            "--enhanced",
            "enh",
            "--out",
            "ev1",
        ],
    );
    assert!(String::from_utf8_lossy(&report.stdout).contains("psnr"));
    ok(
        d,
        &[
            "eval",
            "--dataset",
            "data",
            "--enhanced",
            "enh",
            "--out",
            "ev2",
        ],
    );
    let a = fs::read(d.join("ev1/metrics.json")).unwrap();
    assert_eq!(a, fs::read(d.join("ev2/metrics.json")).unwrap());
    let parsed: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(parsed["mean"]["clips"], 2);

    for out in ["rep1", "rep2"] {
        ok(
            d,
            &[
                "report",
                "--log",
                "base/train_log.jsonl",
                "--log",
                "pp/train_log.jsonl",
                "--metrics",
                "ev1/metrics.json",
                "--out",
                out,
            ],
        );
    }
    let rep = snapshot(&d.join("rep1"));
    let again = snapshot(&d.join("rep2"));
    for file in [
        "report.md",
        "loss_base.png",
        "loss_pp.png",
        "loss_total.png",
        "psnr.png",
    ] {
        assert!(rep.contains_key(file), "missing {file}");
        assert_eq!(rep[file], again[file], "{file} differs");
    }
    let md = String::from_utf8(rep["report.md"].clone()).unwrap();
    assert!(
        md.contains("| base | 3 |") && md.contains("| pp | 2 |"),
        "{md}"
    );
    assert!(md.contains("| ev1 | 2 |"), "{md}");
    image::open(d.join("rep1/psnr.png")).unwrap();
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_dataset(d);
    let mut args = vec![
        "train",
        "--dataset",
        "data",
        "--out",
        "full",
        "--t-max",
        "4",
    ];
    args.extend(QUICK);
    ok(d, &args);
    let mut args = vec![
        "train",
        "--dataset",
        "data",
        "--out",
        "half",
        "--t-max",
        "4",
        "--checkpoint-every",
        "2",
    ];
    args.extend(QUICK);
    ok(d, &args);
    fs::remove_file(d.join("half/final.ckpt")).unwrap();
    let mut args = vec![
        "train",
        "--dataset",
        "data",
        "--out",
        "resumed",
        "--t-max",
        "4",
        "--resume",
        "half/step_000002.ckpt",
    ];
    args.extend(QUICK);
    ok(d, &args);
    assert_eq!(
        fs::read(d.join("full/final.ckpt")).unwrap(),
        fs::read(d.join("resumed/final.ckpt")).unwrap()
    );
    let full = log_without_times(&d.join("full/train_log.jsonl"));
    assert_eq!(
        log_without_times(&d.join("resumed/train_log.jsonl")),
        full[2..]
    );
}
