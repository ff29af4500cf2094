use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn lipar(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lipar"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Value {
    let out = lipar(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    if out.stdout.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&out.stdout).unwrap()
    }
}

#[test]
fn prune_then_restore_round_trips_a_static_grid() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--kind", "static", "--dims", "16,8,8,2", "--out", "g.ltns"]);
    let stats = ok(d, &["prune", "--input", "g.ltns", "--out", "m.ltns", "--kept-out", "k.ltns", "--emit-stages", "stages"]);
    assert_eq!(stats["kind"], "prune-stats");
    assert!(stats["report"]["prune_rate"].as_f64().unwrap() > 0.0);
    assert!(d.join("stages/dilated.ltns").exists());
    ok(d, &["restore", "--kept", "k.ltns", "--mask", "m.ltns", "--out", "r.ltns"]);
    assert_eq!(fs::read(d.join("g.ltns")).unwrap(), fs::read(d.join("r.ltns")).unwrap());
}

#[test]
fn seeded_commands_are_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    for name in ["a.ltns", "b.ltns"] {
        ok(d, &["synth", "--kind", "redundant-noisy", "--dims", "4,8,8,2", "--sigma", "0.1", "--seed", "9", "--out", name]);
    }
    assert_eq!(fs::read(d.join("a.ltns")).unwrap(), fs::read(d.join("b.ltns")).unwrap());

    let args = [
        "recover-bench", "--tokens", "128", "--frames", "8", "--dim", "16", "--heads", "2", "--prune-pattern", "random:0.3",
        "--noise", "0.1", "--seed", "4",
    ];
    assert_eq!(lipar(d, &args).stdout, lipar(d, &args).stdout);
}

#[test]
fn exact_recovery_passes_its_check() {
    let tmp = TempDir::new().unwrap();
    let r = ok(
        tmp.path(),
        &["recover-bench", "--tokens", "256", "--dim", "32", "--heads", "2", "--causal", "false", "--max-rel-error", "1e-5"],
    );
    assert_eq!(r["report"]["max_rel_error"], 0.0);
}

#[test]
fn failed_numerical_check_exits_with_3() {
    let tmp = TempDir::new().unwrap();
    let out = lipar(
        tmp.path(),
        &[
            "recover-bench", "--tokens", "256", "--dim", "32", "--heads", "2", "--causal", "false", "--drift", "0.2",
            "--max-rel-error", "1e-6",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn invalid_input_exits_with_2() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--dims", "4,8,8,2", "--out", "g.ltns"]);
    fs::write(d.join("bad.json"), r#"{"prune": {"tau3": 1}}"#).unwrap();
    let cases: [&[&str]; 4] = [
        &["pipeline", "--input", "g.ltns", "--config", "bad.json", "--out", "p.ltns"],
        &["recover-bench", "--prune-pattern", "sometimes"],
        &["prune", "--input", "missing.ltns", "--out", "m.ltns"],
        &["prune", "--input", "g.ltns", "--out", "m.ltns", "--patch", "3,2,2"],
    ];
    for args in cases {
        assert_eq!(lipar(d, args).status.code(), Some(2), "{args:?}");
    }
    fs::write(d.join("short.ltns"), &fs::read(d.join("g.ltns")).unwrap()[..40]).unwrap();
    assert_eq!(lipar(d, &["prune", "--input", "short.ltns", "--out", "m.ltns"]).status.code(), Some(2));
}

#[test]
fn pipeline_writes_grid_and_stats() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["synth", "--kind", "moving-square", "--dims", "8,8,8,2", "--out", "g.ltns"]);
    fs::write(
        d.join("cfg.json"),
        r#"{"denoiser": {"n_blocks": 1, "model_dim": 16, "n_heads": 1, "mlp_hidden": 16,
            "rope": {"base": 10000.0, "rotated_dims": 16, "mode": "temporal"}}, "recovery": null}"#,
    )
    .unwrap();
    ok(d, &["pipeline", "--input", "g.ltns", "--config", "cfg.json", "--out", "p.ltns", "--stats", "s.json"]);
    let stats: Value = serde_json::from_str(&fs::read_to_string(d.join("s.json")).unwrap()).unwrap();
    assert_eq!(stats["kind"], "pipeline-stats");
    assert_eq!(
        fs::metadata(d.join("p.ltns")).unwrap().len(),
        fs::metadata(d.join("g.ltns")).unwrap().len()
    );
}

#[test]
fn latency_sweep_emits_csv_and_curve() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let curve = ok(
        d,
        &[
            "latency-sweep", "--blocks", "1", "--tokens", "256", "--frames", "4", "--dim", "16", "--runs", "2", "--csv",
            "l.csv",
        ],
    );
    assert_eq!(curve["report"]["samples"].as_array().unwrap().len(), 5);
    let csv = fs::read_to_string(d.join("l.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("kept_fraction,mean_ms,std_ms"));
    assert_eq!(lines.count(), 5);
}

#[test]
fn correlation_and_compression_reports() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(
        d,
        &[
            "synth", "--kind", "linear-gaussian-pair", "--dims", "21,20,20,1", "--sigma", "0.5", "--out", "px.ltns",
            "--latent-out", "lt.ltns",
        ],
    );
    let r = ok(d, &["analyze-corr", "--pixel", "px.ltns", "--latent", "lt.ltns", "--patch", "1,1,1", "--pixel-patch", "1,1,1"]);
    assert_eq!(r["kind"], "pearson");
    assert!(r["report"]["r"].as_f64().unwrap() > 0.5);

    let c = ok(d, &["compress", "--input", "px.ltns", "--patch", "1,1,1", "--thetas", "0,inf", "--compressed-out", "c.ltns"]);
    let reports = c["report"].as_array().unwrap();
    assert_eq!(reports[0]["compressed_fraction"], 0.0);
    assert_eq!(reports[1]["compressed_fraction"], 1.0);
    assert_eq!(reports[1]["theta"], "inf");
    assert!(d.join("c.ltns").exists());
}

#[test]
fn noise_stats_reports_both_populations() {
    let tmp = TempDir::new().unwrap();
    let r = ok(tmp.path(), &["noise-stats", "--dim", "16", "--samples", "5000", "--w", "random", "--seed", "2"]);
    assert_eq!(r["kind"], "noise-moments");
    assert_eq!(r["report"]["duplicated"]["duplicated"], true);
    assert_eq!(r["report"]["independent"]["duplicated"], false);
}
