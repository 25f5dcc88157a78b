use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mmrec_core::autodiff::Matrix;
use mmrec_core::data::ibmf::write_matrix;
use mmrec_core::data::Precision;

fn mmrec(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmrec"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = mmrec(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_synth(dir: &Path, name: &str) {
    ok(
        dir,
        &[
            "synth",
            "--users",
            "40",
            "--items",
            "30",
            "--rank",
            "3",
            "--relevant-dim",
            "4",
            "--irrelevant-dim",
            "6",
            "--interactions-per-user",
            "6",
            "--seed",
            "3",
            "--out",
            name,
        ],
    );
}

const FAST: [&str; 8] = [
    "--set",
    "max_epochs=2",
    "--set",
    "batch_size=64",
    "--set",
    "knn_topk=4",
    "--set",
    "embedding_dim=8",
];

fn train(dir: &Path, dataset: &str, out: &str, extra: &[&str]) -> Output {
    let set = format!("dataset={dataset}");
    let mut args = vec!["train", "--set", &set, "--out", out];
    args.extend_from_slice(&FAST);
    args.extend_from_slice(extra);
    mmrec(dir, &args)
}

fn listing(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| {
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                fs::read(&p).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

#[test]
fn train_writes_run_directory_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_synth(dir, "ds");
    assert!(train(dir, "ds", "a", &[]).status.success());
    assert!(train(dir, "ds", "b", &[]).status.success());
    for f in ["config.txt", "epochs.jsonl", "report.json", "metrics.json"] {
        assert!(dir.join("a").join(f).is_file(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(dir.join("a/epochs.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2
    );
    assert_eq!(
        listing(&dir.join("a/checkpoint")),
        listing(&dir.join("b/checkpoint"))
    );
    assert_eq!(
        fs::read(dir.join("a/metrics.json")).unwrap(),
        fs::read(dir.join("b/metrics.json")).unwrap()
    );

    // Re-running from the echo alone reproduces the run.
    ok(dir, &["train", "--config", "a/config.txt", "--out", "c"]);
    assert_eq!(
        listing(&dir.join("a/checkpoint")),
        listing(&dir.join("c/checkpoint"))
    );
}

#[test]
fn evaluate_only_writes_its_report() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_synth(dir, "ds");
    assert!(
        train(dir, "ds", "run", &["--set", "graph_refresh=per_epoch"])
            .status
            .success()
    );
    let before_run = listing(&dir.join("run"));
    let before_ckpt = listing(&dir.join("run/checkpoint"));
    let before_ds = listing(&dir.join("ds"));
    ok(
        dir,
        &[
            "evaluate",
            "--checkpoint",
            "run/checkpoint",
            "--split",
            "test",
        ],
    );
    let report = dir.join("run/eval_test.json");
    assert_eq!(
        fs::read(&report).unwrap(),
        fs::read(dir.join("run/metrics.json")).unwrap()
    );
    fs::remove_file(&report).unwrap();
    assert_eq!(listing(&dir.join("run")), before_run);
    assert_eq!(listing(&dir.join("run/checkpoint")), before_ckpt);
    assert_eq!(listing(&dir.join("ds")), before_ds);
}

#[test]
fn vbpr_echo_disables_graph_modules() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_synth(dir, "ds");
    assert!(train(dir, "ds", "run", &["--set", "backbone=vbpr"])
        .status
        .success());
    let echo = fs::read_to_string(dir.join("run/config.txt")).unwrap();
    assert!(echo.contains("bipartite_graph = false, item_graph = false"));
    assert!(echo.contains("gib_enabled = false"));
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(
        mmrec(dir, &["train", "--set", "nope=1", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        mmrec(dir, &["train", "--set", "alpha=-1", "--out", "x"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(mmrec(dir, &["bogus"]).status.code(), Some(2));
    let missing = mmrec(dir, &["train", "--set", "dataset=missing", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("missing"));

    small_synth(dir, "ds");
    let blowup = train(dir, "ds", "run", &["--set", "learning_rate=1e308"]);
    assert_eq!(blowup.status.code(), Some(4));
}

fn write_raw_inputs(dir: &Path, rows: usize) {
    let mut tsv = String::new();
    for u in 0..6 {
        for k in 0..4 {
            tsv.push_str(&format!("user{u}\titem{}\n", (u + 2 * k) % 8));
        }
    }
    fs::write(dir.join("inter.tsv"), tsv).unwrap();
    let data: Vec<f64> = (0..rows * 3).map(|v| (v as f64 * 0.37).sin()).collect();
    let m = Matrix::from_vec(rows, 3, data).unwrap();
    write_matrix(&dir.join("visual.ibmf"), &m, Precision::F32).unwrap();
}

#[test]
fn prepare_is_deterministic_and_checks_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write_raw_inputs(dir, 8);
    let args = |out: &'static str| {
        vec![
            "prepare",
            "--interactions",
            "inter.tsv",
            "--feature",
            "visual=visual.ibmf",
            "--ratios",
            "0.6,0.2,0.2",
            "--seed",
            "9",
            "--out",
            out,
        ]
    };
    let summary = ok(dir, &args("p1"));
    let json: serde_json::Value = serde_json::from_slice(&summary.stdout).unwrap();
    assert_eq!(json["users"], 6);
    assert_eq!(json["items"], 8);
    assert_eq!(json["interactions"], 24);
    ok(dir, &args("p2"));
    assert_eq!(listing(&dir.join("p1")), listing(&dir.join("p2")));

    write_raw_inputs(dir, 7);
    let bad = mmrec(dir, &args("p3"));
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("`visual`"));
}

#[test]
fn ablate_and_sweep_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_synth(dir, "ds");
    let mut args = vec!["ablate", "--set", "dataset=ds", "--out", "ab"];
    args.extend_from_slice(&FAST);
    ok(dir, &args);
    let table = fs::read_to_string(dir.join("ab/ablation.csv")).unwrap();
    let variants: Vec<&str> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(variants, ["full", "w/o FIB", "w/o GIB", "w/o IB"]);

    let mut args = vec![
        "sweep",
        "--set",
        "dataset=ds",
        "--grid",
        "alpha=0.5,1",
        "--grid",
        "sigma_sq_fib=0.15,0.25",
        "--seeds",
        "3",
        "--out",
        "sw",
        "--set",
        "max_epochs=1",
    ];
    args.extend_from_slice(&FAST[2..]);
    ok(dir, &args);
    let csv = fs::read_to_string(dir.join("sw/sweep.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("run,")).count(), 12);
    assert_eq!(csv.lines().filter(|l| l.starts_with("summary,")).count(), 4);
    assert!(csv.lines().last().unwrap().starts_with("# best: alpha="));
}
