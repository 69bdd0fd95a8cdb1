//! End-to-end CLI walkthrough on the bundled sample corpus with the
//! synthetic endpoint: ingest -> run -> score -> analyze -> report ->
//! replay, plus the inference-accounting invariant.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn sample_corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/sample/sample.jsonl")
}

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("config.json");
    let config = serde_json::json!({
        "dataset": sample_corpus(),
        "endpoint": "synthetic",
        "synthetic": {"bias_strength": 1.2, "feature_seed": 5},
        "master_seed": 9,
        "n_perturbations": 4,
        "biases": ["phrasing", "positional", "label", "shape", "orientation", "lowlevel"],
        "concurrency": 2
    });
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).unwrap();
    path
}

fn uqbias(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uqbias"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_ok(output: &Output, what: &str) -> String {
    let stdout = String::from_utf8_lossy(&output.stdout).into_owned();
    assert!(
        output.status.success(),
        "{what} failed\nstdout: {stdout}\nstderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    stdout
}

#[test]
fn full_cli_walkthrough() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let config_str = config.to_str().unwrap();
    let out_dir = tmp.path().join("run");
    let out_str = out_dir.to_str().unwrap();

    let stdout = assert_ok(
        &uqbias(&["ingest", "--config", config_str, "--out", out_str]),
        "ingest",
    );
    assert!(stdout.contains("ingested 20 instances"));

    let stdout = assert_ok(
        &uqbias(&["run", "--config", config_str, "--out", out_str]),
        "run",
    );
    assert!(stdout.contains("run complete"));
    assert!(out_dir.join("manifest.json").exists());
    assert!(out_dir.join("queries.jsonl").exists());
    assert!(out_dir.join("measurements.jsonl").exists());

    let stdout = assert_ok(
        &uqbias(&["score", "--config", config_str, "--out", out_str]),
        "score",
    );
    assert!(stdout.contains("single_entropy"));
    assert!(stdout.contains("text3_entropy"));
    assert!(out_dir.join("scores.jsonl").exists());

    let stdout = assert_ok(
        &uqbias(&["analyze", "--config", config_str, "--out", out_str]),
        "analyze",
    );
    assert!(stdout.contains("regressions vs confidence"));
    assert!(stdout.contains("abs_change_epistemic"));

    assert_ok(
        &uqbias(&["report", "--config", config_str, "--out", out_str]),
        "report",
    );
    let reports = out_dir.join("reports");
    for name in [
        "auroc_table.csv",
        "accuracy_table.csv",
        "regressions_confidence.csv",
        "regressions_epistemic_inconfidence.csv",
        "roc_single_entropy.csv",
        "roc_text3_entropy.csv",
        "summary.md",
    ] {
        assert!(reports.join(name).exists(), "{name} missing");
    }
    let auroc_table = std::fs::read_to_string(reports.join("auroc_table.csv")).unwrap();
    assert!(auroc_table.starts_with("method,inference_count,"));
    let accuracy = std::fs::read_to_string(reports.join("accuracy_table.csv")).unwrap();
    assert!(accuracy.lines().any(|l| l.starts_with("default,")));
    for bias in ["phrasing", "positional", "label", "shape", "orientation", "lowlevel"] {
        assert!(
            accuracy.lines().any(|l| l.starts_with(&format!("{bias},"))),
            "accuracy table missing {bias} family"
        );
    }

    let stdout = assert_ok(
        &uqbias(&["replay", "--config", config_str, "--out", out_str]),
        "replay",
    );
    assert!(stdout.contains("0 backend calls"), "replay issued calls: {stdout}");
    assert!(stdout.contains("replay verified"));

    // Overridden seed must refuse to mix with the existing run directory.
    let clash = uqbias(&[
        "run",
        "--config",
        config_str,
        "--out",
        out_str,
        "--seed",
        "10",
    ]);
    assert!(!clash.status.success());
    assert!(String::from_utf8_lossy(&clash.stderr).contains("config digest"));
}

#[test]
fn inference_accounting_matches_persisted_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let config = write_config(tmp.path());
    let out_dir = tmp.path().join("run");
    assert_ok(
        &uqbias(&[
            "run",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        "run",
    );
    assert_ok(
        &uqbias(&[
            "score",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
        ]),
        "score",
    );

    // Count persisted queries per purpose for one instance.
    let queries = std::fs::read_to_string(out_dir.join("queries.jsonl")).unwrap();
    let mut per_instance: HashMap<(String, String), u32> = HashMap::new();
    for line in queries.lines() {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        let instance = value["instance_id"].as_str().unwrap().to_string();
        let purpose = &value["purpose"];
        let group = match purpose["kind"].as_str().unwrap() {
            "greedy" => "greedy".to_string(),
            "repetitive" => "repetitive".to_string(),
            "suite" => format!("suite:{}", purpose["bias"].as_str().unwrap()),
            other => panic!("unknown purpose {other}"),
        };
        *per_instance.entry((instance, group)).or_insert(0) += 1;
    }
    let instances: std::collections::HashSet<&String> =
        per_instance.keys().map(|(i, _)| i).collect();
    assert_eq!(instances.len(), 20);

    // Per instance: 1 greedy, 4 repetitive, 4 per bias suite.
    for ((instance, group), count) in &per_instance {
        let expected = if group == "greedy" { 1 } else { 4 };
        assert_eq!(
            *count, expected,
            "instance {instance} group {group}: {count} persisted queries"
        );
    }

    // MethodScore inference counts line up with the persisted groups.
    let scores = std::fs::read_to_string(out_dir.join("scores.jsonl")).unwrap();
    for line in scores.lines() {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        let method = value["method_id"].as_str().unwrap();
        let inference_count = value["inference_count"].as_u64().unwrap() as u32;
        let expected = match method {
            m if m.starts_with("single_") => 1,
            m if m.starts_with("text3_") || m.starts_with("image3_") => 12,
            _ => 4,
        };
        assert_eq!(inference_count, expected, "method {method}");
    }
}
