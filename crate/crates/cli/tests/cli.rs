use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmasched"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

const SMALL_CONV: &str = r#"{"batch":2,"height":8,"width":8,"in_channels":32,"out_channels":32,
"kernel_h":3,"kernel_w":3,"stride":1,"pad":1}"#;

#[test]
fn help_documents_every_subcommand() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in [
        "lower",
        "simulate",
        "tune",
        "pack-demo",
        "report",
        "experiment",
    ] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
    let out = run(&["tune", "--help"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in [
        "--conv",
        "--machine",
        "--space",
        "--variant",
        "--trials",
        "--noise",
        "--seed",
        "--out",
    ] {
        assert!(text.contains(flag), "{flag} missing from tune help");
    }
}

#[test]
fn lower_prints_stage_ops() {
    let out = run(&["lower", "--preset", "resnet50_stage3"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["ops"], 1_849_688_064u64);
    assert_eq!(v["gemm"]["m"], 8 * 28 * 28);
}

#[test]
fn simulate_emits_cost_fields() {
    let dir = tempfile::tempdir().unwrap();
    let sched = write(
        dir.path(),
        "s.json",
        r#"{"blk_row_warps":2,"blk_col_warps":2,"warp_row_tiles":4,"warp_col_tiles":2,"chunk":2,
        "reorder_inner":false,"duplicate_aware":true,"register_packing":true,"layout":"NHWCnc"}"#,
    );
    let out = run(&[
        "simulate",
        "--preset",
        "resnet50_stage2",
        "--schedule",
        &sched,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for field in [
        "global_load_transactions",
        "global_store_transactions",
        "smem_load_bytes",
        "smem_store_bytes",
        "mma_ops",
        "smem_per_block",
        "blocks",
        "occupancy_waves",
        "estimated_cycles",
    ] {
        assert!(v["cost"].get(field).is_some(), "{field}");
    }
    assert_eq!(v["runtime"], v["cost"]["estimated_cycles"]);
}

#[test]
fn exit_codes_follow_error_category() {
    let dir = tempfile::tempdir().unwrap();
    let bad_sched = write(
        dir.path(),
        "bad.json",
        r#"{"blk_row_warps":8,"blk_col_warps":8,"warp_row_tiles":1,"warp_col_tiles":1,"chunk":1,"reorder_inner":false}"#,
    );
    let out = run(&[
        "simulate",
        "--preset",
        "resnet50_stage2",
        "--schedule",
        &bad_sched,
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warps per block 64 > 32"));

    let broken = write(dir.path(), "conv.json", "{\"batch\": 1,\n \"height\": }");
    let out = run(&["lower", "--conv", &broken]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));

    let out = run(&["lower", "--conv", "/definitely/not/here.json"]);
    assert_eq!(out.status.code(), Some(6));

    let out = run(&["tune", "--preset", "resnet50_stage2"]);
    assert_eq!(out.status.code(), Some(2), "clap usage errors");
}

#[test]
fn tune_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let conv = write(dir.path(), "conv.json", SMALL_CONV);
    let trace = dir.path().join("t.jsonl").display().to_string();
    let out = run(&[
        "tune",
        "--conv",
        &conv,
        "--trials",
        "64",
        "--seed",
        "2",
        "--variant",
        "baseline",
        "--out",
        &trace,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let lines = std::fs::read_to_string(&trace).unwrap();
    let trials = lines
        .lines()
        .filter(|l| l.contains("\"kind\":\"trial\""))
        .count();
    assert_eq!(trials, 64);

    let csv = dir.path().join("best.csv").display().to_string();
    let out = run(&["report", "--trace", &trace, "--out", &csv]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 65);
    let best: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse().unwrap())
        .collect();
    assert!(best.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn coalescing_report() {
    let out = run(&["report", "--coalescing", "--preset", "resnet50_stage2"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("layout,tile,transactions"));
    assert!(text
        .lines()
        .any(|l| l.starts_with("nhwcnc,") && l.split(',').nth(2) == Some("4")));
    assert!(text
        .lines()
        .any(|l| l.starts_with("nhwc,") && l.split(',').nth(2) == Some("8")));
}

#[test]
fn pack_demo_reports_an_eighth() {
    let out = run(&["pack-demo", "--tiles", "8"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["store_bytes_unpacked"], 1024);
    assert_eq!(v["store_bytes_packed"], 128);
    assert_eq!(v["ratio"], 8.0);
}

fn experiment_files(jobs: &str) -> Vec<(String, Vec<u8>)> {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "spec.json",
        &format!(
            r#"{{"convs":[{{"name":"small","conv":{SMALL_CONV}}}],
            "cells":[{{"duplicate_aware":false,"register_packing":false,"layout":"NHWC"}},
                     {{"duplicate_aware":true,"register_packing":true,"layout":"NHWCnc"}}],
            "explorer":{{"trial_budget":64,"seed":9}},"noise_sigma":0.05}}"#
        ),
    );
    let out_dir = dir.path().join("out");
    let out = run(&[
        "experiment",
        "--spec",
        &spec,
        "--out",
        out_dir.to_str().unwrap(),
        "--jobs",
        jobs,
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut files = Vec::new();
    for sub in [out_dir.clone(), out_dir.join("traces")] {
        let mut names: Vec<_> = std::fs::read_dir(&sub)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for p in names {
            files.push((
                p.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&p).unwrap(),
            ));
        }
    }
    files
}

#[test]
fn experiment_outputs_are_reproducible() {
    let a = experiment_files("1");
    let b = experiment_files("3");
    assert_eq!(a.len(), 5);
    assert_eq!(a, b);
    let acc = String::from_utf8(
        a.iter()
            .find(|f| f.0 == "accumulated.csv")
            .unwrap()
            .1
            .clone(),
    )
    .unwrap();
    assert!(acc.lines().nth(1).unwrap().ends_with(",1.0000"));
}
