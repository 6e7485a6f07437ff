//! End-to-end runs of the compiled binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tsbench::synthetic;
use tsbench::tsf::serialize_tsf;

fn tsbench(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsbench"))
        .args(args)
        .env_remove("TSBENCH_STORE")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).to_string()
}

#[test]
fn inspect_reports_dataset_statistics() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("hospital_like.tsf");
    fs::write(&path, serialize_tsf(&synthetic::hospital_like_dataset(2))).unwrap();
    let out = tsbench(&["inspect", path.to_str().unwrap()]);
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("series=767"));
    assert!(text.contains("min_len=84"));
    assert!(text.contains("max_len=84"));
    assert!(text.contains("freq=monthly"));
}

#[test]
fn failures_emit_one_json_error_line() {
    let out = tsbench(&["evaluate", "/nonexistent/store", "--dataset", "x"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(line).expect("stderr line is JSON");
    assert!(parsed.get("error").is_some());
}

fn write_pipeline_fixtures(dir: &Path) -> (String, String) {
    let ds = synthetic::seasonal_dataset("clitoy", 3, 60, 4, 0.1, 13);
    let tsf_path = dir.join("clitoy.tsf");
    fs::write(&tsf_path, serialize_tsf(&ds)).unwrap();
    let store = dir.join("store");
    let manifest = serde_json::json!({
        "dataset": tsf_path,
        "store": store,
        "parallelism": 2,
        "allow_offgrid": true,
        "epochs": 3,
        "batches_per_epoch": 4,
        "batch_size": 8,
        "forecast_samples": 10,
        "grid": {
            "contexts": [2, 4],
            "strategies": ["OOS"],
            "shapes": ["Base"],
            "dist_hidden": [1],
            "learning_rates": [0.01, 0.001],
            "weight_decays": [0.0],
            "seeds": [100, 101]
        }
    });
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();
    (manifest_path.to_str().unwrap().to_string(), store.to_str().unwrap().to_string())
}

#[test]
fn sweep_hpo_importance_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, store) = write_pipeline_fixtures(dir.path());

    let out = tsbench(&["sweep", &manifest]);
    assert!(out.status.success(), "sweep failed: {}", String::from_utf8_lossy(&out.stderr));
    let text = stdout(&out);
    assert!(text.contains("todo=8"), "{text}");
    assert!(text.contains("complete=true"), "{text}");
    assert!(Path::new(&store).join("sweep_summary_clitoy.csv").exists());

    // Resume: the second sweep is a no-op and leaves the files untouched.
    let configs_before = fs::read(Path::new(&store).join("clitoy/configs.jsonl")).unwrap();
    let out = tsbench(&["sweep", &manifest]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("todo=0"));
    let configs_after = fs::read(Path::new(&store).join("clitoy/configs.jsonl")).unwrap();
    assert_eq!(configs_before, configs_after);

    let out = tsbench(&["evaluate", &store, "--dataset", "clitoy", "--metric", "mase"]);
    assert!(out.status.success());
    assert!(stdout(&out).contains("best value="));

    // Identical hpo invocations produce identical trace files.
    let hpo_args =
        ["hpo", &store, "--method", "hyperband", "--trials", "10", "--seed", "1", "--dataset", "clitoy"];
    let out = tsbench(&hpo_args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let trace_path = Path::new(&store).join("hpo_traces/clitoy__hyperband__seed1.json");
    let first = fs::read(&trace_path).unwrap();
    let out = tsbench(&hpo_args);
    assert!(out.status.success());
    assert_eq!(first, fs::read(&trace_path).unwrap(), "hpo trace not reproducible");

    let out = tsbench(&["hpo", &store, "--method", "random", "--trials", "5", "--seed", "2"]);
    assert!(out.status.success());

    let out = tsbench(&["importance", &store, "--dataset", "clitoy", "--objective", "nll"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("importance"));
    assert!(Path::new(&store).join("reports/clitoy_importance.csv").exists());

    let out = tsbench(&["report", &store]);
    assert!(out.status.success());
    assert!(Path::new(&store).join("reports/summary.csv").exists());
    assert!(Path::new(&store).join("reports/context_scatter.csv").exists());
    assert!(Path::new(&store).join("reports/clitoy_configs.csv").exists());
}

#[test]
fn store_env_var_provides_default_path() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, store) = write_pipeline_fixtures(dir.path());
    let out = tsbench(&["sweep", &manifest]);
    assert!(out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_tsbench"))
        .args(["evaluate", "--dataset", "clitoy"])
        .env("TSBENCH_STORE", &store)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
