use std::path::Path;
use std::process::Command;

use attnindex::cli::run_from;
use attnindex::vecstore::{FileRole, Manifest};

fn run(out: &Path, args: &[&str]) -> attnindex::cli::Outcome {
    let out_s = out.display().to_string();
    let mut full = vec!["attnindex", "--out", &out_s];
    full.extend_from_slice(args);
    run_from(full).unwrap()
}

const TINY: [&str; 8] = [
    "--set", "workload.seed=4",
    "--set", "workload.n_ctx=16",
    "--set", "workload.d_model=8",
    "--set", "workload.d_head=8",
];

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_minimal_writes_four_files_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen", "--verify"];
    args.extend_from_slice(&TINY);
    let out = run(dir.path(), &args);
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let names: Vec<String> = files(&dir.path().join("workload")).into_iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        ["group0_k.kvd", "group0_v.kvd", "head0_qdecode.kvd", "head0_qprefill.kvd", "manifest.json"]
    );
}

#[test]
fn gen_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let mut args = vec!["gen"];
    args.extend_from_slice(&TINY);
    run(a.path(), &args);
    run(b.path(), &args);
    // rerun into the same directory overwrites with the same bytes
    let first = files(&a.path().join("workload"));
    run(a.path(), &args);
    assert_eq!(first, files(&a.path().join("workload")));
    assert_eq!(first, files(&b.path().join("workload")));
}

#[test]
fn gqa_manifest_counts() {
    let dir = tempfile::tempdir().unwrap();
    run(
        dir.path(),
        &[
            "gen",
            "--set", "workload.seed=1",
            "--set", "workload.n_ctx=32",
            "--set", "workload.d_model=16",
            "--set", "workload.d_head=8",
            "--set", "workload.n_heads=8",
            "--set", "workload.n_kv_groups=2",
            "--set", "workload.n_decode=2",
        ],
    );
    let m = Manifest::load(dir.path().join("workload/manifest.json")).unwrap();
    assert_eq!((m.n_heads, m.n_kv_groups), (8, 2));
    assert_eq!(m.count(FileRole::QueryPrefill), 8);
    assert_eq!(m.count(FileRole::QueryDecode), 8);
    assert_eq!(m.count(FileRole::Key), 2);
    assert_eq!(m.count(FileRole::Value), 2);
}

#[test]
fn flat_build_has_no_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["build", "--verify", "--set", "index.kind=flat"];
    args.extend_from_slice(&TINY);
    run(dir.path(), &args);
    assert!(!dir.path().join("index").exists());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("build_report.json")).unwrap()).unwrap();
    assert_eq!(report["heads"][0]["note"], "no preprocessing");
    assert!(report["heads"][0].get("artifact").is_none());
}

#[test]
fn graph_build_reports_structure_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        dir.path(),
        &["build", "--verify", "--set", "workload.seed=2", "--set", "workload.n_ctx=2048", "--set", "workload.n_decode=16"],
    );
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("build_report.json")).unwrap()).unwrap();
    let g = &report["heads"][0]["graph"];
    assert_eq!(g["reachable"], 2048);
    let hist: Vec<u64> = serde_json::from_value(g["degree_histogram"].clone()).unwrap();
    assert!(hist.len() <= 33);
    assert_eq!(hist.iter().sum::<u64>(), 2048);
    assert!(dir.path().join("index/head0.oodg").exists());
}

#[test]
fn manifest_input_replaces_generation() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["gen"];
    args.extend_from_slice(&TINY);
    run(dir.path(), &args);
    let manifest = dir.path().join("workload/manifest.json").display().to_string();
    let set = format!("input.manifest={manifest:?}");
    let out = run(
        dir.path(),
        &["decode", "--verify", "--set", &set, "--set", "engine.steps=4", "--set", "engine.s_init=2", "--set", "engine.s_local=4", "--set", "engine.top_k=3"],
    );
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("decode_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["steps"], 4);
    assert_eq!(summary["max_omega"], 3);
    let trace = std::fs::read_to_string(dir.path().join("decode_trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 4);
}

#[test]
fn config_file_with_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(
        &cfg,
        r#"{"workload": {"seed": 3, "n_ctx": 1024, "n_decode": 8}, "sweep": {"kinds": ["flat", "ivf"], "nprobe_grid": [1, 4, 32, 999]}}"#,
    )
    .unwrap();
    let cfg_s = cfg.display().to_string();
    let out = run(dir.path(), &["sweep", "--verify", "--config", &cfg_s, "--set", "output.formats=[\"csv\"]"]);
    assert!(out.failures.is_empty(), "{:?}", out.failures);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "index_kind,param,recall_at_k,scan_fraction,n_queries");
    assert!(lines[1].starts_with("flat,0,1,1,8"), "{}", lines[1]);
    // nlist is 32 for 1024 keys, so nprobe 999 is dropped
    assert_eq!(lines.len(), 1 + 1 + 3);
    assert!(!dir.path().join("sweep.jsonl").exists());
}

#[test]
fn binary_exit_codes() {
    let exe = env!("CARGO_BIN_EXE_attnindex");
    let dir = tempfile::tempdir().unwrap();
    let ok = Command::new(exe)
        .args(["diagnose", "--verify", "--out"])
        .arg(dir.path())
        .args(["--set", "workload.seed=1", "--set", "workload.n_ctx=512", "--set", "diagnose.sample=100"])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    assert!(dir.path().join("gap.json").exists());
    assert!(dir.path().join("mse_sweep.csv").exists());

    let bad = Command::new(exe).args(["gen", "--set", "workload.bogus=1"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
    let unseeded = Command::new(exe).arg("gen").output().unwrap();
    assert_eq!(unseeded.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unseeded.stderr).contains("seed"));
}
