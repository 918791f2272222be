//! End-to-end tests of the `inkseg` binary: pipeline behavior, output
//! determinism, run-config echo, and error reporting.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_inkseg")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_is_deterministic_and_echoes_run_config() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["synth", "--out", "a.jsonl", "--n", "30", "--seed", "7", "--spikes"];
    assert_ok(&run_in(dir.path(), &args));
    let first = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let first_cfg = std::fs::read(dir.path().join("a.jsonl.run.json")).unwrap();

    assert_ok(&run_in(dir.path(), &args));
    let second = std::fs::read(dir.path().join("a.jsonl")).unwrap();
    let second_cfg = std::fs::read(dir.path().join("a.jsonl.run.json")).unwrap();
    assert_eq!(first, second, "corpus bytes must be reproducible");
    assert_eq!(first_cfg, second_cfg);

    // The resolved config round-trips through serde identically.
    let text = String::from_utf8(first_cfg).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let re = serde_json::to_string_pretty(&value).unwrap();
    assert_eq!(text, re);

    // A different seed changes the corpus.
    assert_ok(&run_in(
        dir.path(),
        &["synth", "--out", "b.jsonl", "--n", "30", "--seed", "8", "--spikes"],
    ));
    let other = std::fs::read(dir.path().join("b.jsonl")).unwrap();
    assert_ne!(first, other);
}

#[test]
fn kmeans_segment_then_eval_completes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let started = std::time::Instant::now();
    assert_ok(&run_in(
        dir.path(),
        &["synth", "--out", "c.jsonl", "--n", "100", "--seed", "3", "--spikes"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &["segment", "--method", "kmeans", "--in", "c.jsonl", "--out", "p.jsonl"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &[
            "eval", "--in", "p.jsonl", "--report", "r.json", "--csv", "r.csv", "--svg-dir", "svgs",
        ],
    ));
    assert!(
        started.elapsed() < std::time::Duration::from_secs(60),
        "pipeline took {:?}",
        started.elapsed()
    );

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["samples_evaluated"], 100);
    let miou = report["corpus_miou"].as_f64().unwrap();
    assert!(miou > 0.5 && miou <= 1.0, "implausible mIoU {miou}");
    assert!(dir.path().join("svgs/sample_00000.svg").exists());
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert_eq!(csv.lines().count(), 101);

    // Determinism of segment + eval outputs.
    let p1 = std::fs::read(dir.path().join("p.jsonl")).unwrap();
    let r1 = std::fs::read(dir.path().join("r.json")).unwrap();
    assert_ok(&run_in(
        dir.path(),
        &["segment", "--method", "kmeans", "--in", "c.jsonl", "--out", "p.jsonl"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &["eval", "--in", "p.jsonl", "--report", "r.json"],
    ));
    assert_eq!(p1, std::fs::read(dir.path().join("p.jsonl")).unwrap());
    assert_eq!(r1, std::fs::read(dir.path().join("r.json")).unwrap());
}

#[test]
fn eval_of_perfect_predictions_scores_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run_in(
        dir.path(),
        &["synth", "--out", "c.jsonl", "--n", "10", "--seed", "1"],
    ));
    // Copy truth into pred through the library API.
    let entries = inkseg::jsonl::read_corpus(&dir.path().join("c.jsonl")).unwrap();
    let perfect: Vec<inkseg::jsonl::CorpusEntry> = entries
        .into_iter()
        .map(|mut e| {
            e.pred = e.sample.truth.clone();
            e
        })
        .collect();
    inkseg::jsonl::write_corpus(&dir.path().join("perfect.jsonl"), &perfect).unwrap();

    assert_ok(&run_in(
        dir.path(),
        &["eval", "--in", "perfect.jsonl", "--report", "r.json"],
    ));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(report["corpus_miou"].as_f64().unwrap(), 1.0);
}

#[test]
fn gt_approx_and_render_produce_outputs() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(&run_in(
        dir.path(),
        &["synth", "--out", "c.jsonl", "--n", "15", "--seed", "2"],
    ));
    assert_ok(&run_in(
        dir.path(),
        &[
            "gt-approx",
            "--in",
            "c.jsonl",
            "--out",
            "approx.jsonl",
            "--compare-report",
            "cmp.json",
        ],
    ));
    let cmp: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cmp.json")).unwrap())
            .unwrap();
    assert!(cmp["corpus_miou"].as_f64().unwrap() > 0.8);

    assert_ok(&run_in(
        dir.path(),
        &[
            "render", "--in", "c.jsonl", "--out-dir", "out_svg", "--source", "truth", "--limit",
            "4",
        ],
    ));
    assert!(dir.path().join("out_svg/sample_00003.svg").exists());
    assert!(dir.path().join("out_svg/run_config.json").exists());
}

#[test]
fn failures_print_single_error_line_and_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["segment", "--method", "kmeans", "--in", "missing.jsonl", "--out", "p.jsonl"],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), 1, "stderr: {stderr}");
    assert!(lines[0].starts_with("error: "), "stderr: {stderr}");
    // No partial output left behind.
    assert!(!dir.path().join("p.jsonl").exists());

    // Neural segmentation without a checkpoint is a usage error.
    std::fs::write(dir.path().join("c.jsonl"), b"{\"strokes\":[[[0,0]]],\"text\":\"a\"}\n").unwrap();
    let out = run_in(
        dir.path(),
        &["segment", "--method", "charquery", "--in", "c.jsonl", "--out", "p.jsonl"],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn malformed_corpus_line_is_reported_with_its_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.jsonl"),
        b"{\"strokes\":[[[0,0],[1,1]]],\"text\":\"a\"}\n{\"text\":\"b\"}\n",
    )
    .unwrap();
    let out = run_in(
        dir.path(),
        &["segment", "--method", "kmeans", "--in", "bad.jsonl", "--out", "p.jsonl"],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 2"), "stderr: {stderr}");
}
