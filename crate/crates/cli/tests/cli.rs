use std::path::Path;
use std::process::{Command, Output};

fn qgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qgs")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, system: &str, samples: &str, seed: &str, split: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    let o = qgs(&[
        "gen-data", "--system", system, "--samples", samples, "--seed", seed, "--split", split, "--out", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn gen_data_writes_csv_and_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let out = gen(dir.path(), "d.csv", "example1", "200", "7", "train");
    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("u_1,u_2,u_3,u_4,y_1"));
    assert_eq!(lines.count(), 200);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.with_extension("json")).unwrap()).unwrap();
    assert_eq!(meta["N"], 200);
    assert_eq!(meta["system"], "example1");
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.csv", "example2", "50", "3", "test");
    let b = gen(dir.path(), "b.csv", "example2", "50", "3", "test");
    assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
}

#[test]
fn missing_flag_is_a_usage_error() {
    let o = qgs(&["gen-data", "--samples", "10", "--seed", "1", "--split", "train", "--out", "x.csv"]);
    assert_eq!(o.status.code(), Some(2));
    let o = qgs(&["stability", "--suite", "nonsense"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_a_runtime_error() {
    let o = qgs(&[
        "gen-data", "--system", "example1", "--samples", "10", "--seed", "1", "--split", "train", "--out",
        "/nonexistent-dir/d.csv",
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn train_ebp_echoes_hidden_units_and_replays() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.csv", "example1", "30", "1", "train");
    let test = gen(dir.path(), "test.csv", "example1", "30", "1", "test");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"ebp": {"max_epochs": 300}}"#).unwrap();
    let report = dir.path().join("ebp.json");
    let preds = dir.path().join("preds.csv");
    let hist = dir.path().join("hist.csv");
    let o = qgs(&[
        "train", "--method", "ebp", "--train", p(&train), "--test", p(&test), "--hidden", "8", "--seed", "4",
        "--config", p(&cfg), "--out", p(&report), "--predictions", p(&preds), "--trajectory", p(&hist),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["shape"]["m"], 8);
    assert_eq!(r["config"]["hidden"], 8);
    assert_eq!(r["config"]["ebp"]["max_epochs"], 300);
    assert_eq!(r["schema_version"], 1);
    assert!(r["test_mse"].as_f64().unwrap().is_finite());
    assert_eq!(std::fs::read_to_string(&preds).unwrap().lines().count(), 31);
    assert_eq!(std::fs::read_to_string(&hist).unwrap().lines().count(), 302);

    let o = qgs(&["replay", "--report", p(&report), "--train", p(&train), "--test", p(&test)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn train_ebp_divergence_names_the_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.csv", "example1", "30", "1", "train");
    let test = gen(dir.path(), "test.csv", "example1", "30", "1", "test");
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"ebp": {"learning_rate": 50.0, "lr_halving": false}}"#).unwrap();
    let o = qgs(&[
        "train", "--method", "ebp", "--train", p(&train), "--test", p(&test), "--config", p(&cfg), "--out",
        p(&dir.path().join("r.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("diverged at epoch"));
}

#[test]
fn train_rejects_bad_config_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let train = gen(dir.path(), "train.csv", "example1", "20", "1", "train");
    let test2 = gen(dir.path(), "test2.csv", "example2", "20", "1", "test");
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, "{ not json").unwrap();
    let out = dir.path().join("r.json");
    let o = qgs(&["train", "--train", p(&train), "--test", p(&train), "--config", p(&bad), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
    let o = qgs(&["train", "--method", "ebp", "--train", p(&train), "--test", p(&test2), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("shape"));
}

#[test]
fn qgs_and_ga_runs_feed_compare() {
    let dir = tempfile::tempdir().unwrap();
    let data = tempfile::tempdir().unwrap();
    let train = gen(data.path(), "train.csv", "example1", "30", "2", "train");
    let test = gen(data.path(), "test.csv", "example1", "30", "2", "test");
    let cfg = data.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"hidden": 2,
            "search": {"integrator": {"equilibrium_tol": 1e-3, "rel_tol": 1e-4, "abs_tol": 1e-6, "max_steps": 3000},
                       "classify": {"tol": 3e-2}, "escape_directions": 2},
            "budget": {"max_minima": 3, "max_escape_attempts": 2},
            "ga": {"population": 20, "generations": 10},
            "ebp": {"max_epochs": 100}}"#,
    )
    .unwrap();
    for method in ["qgs", "ga", "ebp"] {
        let out = dir.path().join(format!("{method}.json"));
        let traj = data.path().join(format!("{method}-traj.csv"));
        let o = qgs(&[
            "train", "--method", method, "--train", p(&train), "--test", p(&test), "--config", p(&cfg), "--out",
            p(&out), "--trajectory", p(&traj),
        ]);
        assert!(o.status.success(), "{method}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(traj.exists());
    }
    let qgs_report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("qgs.json")).unwrap()).unwrap();
    assert!(qgs_report["archive"]["forward_runs"].as_u64().unwrap() >= 1);

    let table = data.path().join("table.csv");
    let o = qgs(&["compare", "--runs", p(dir.path()), "--out", p(&table)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&table).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.contains("0.00797") && csv.contains("0.0082") && csv.contains("0.0187"));
    assert!(table.with_extension("json").exists());
}

#[test]
fn compare_rejects_empty_directory() {
    let dir = tempfile::tempdir().unwrap();
    let o = qgs(&["compare", "--runs", p(dir.path()), "--out", p(&dir.path().join("t.csv"))]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn stability_suites_pass() {
    for (suite, trials) in [("perturbation", "100"), ("bounds", "20"), ("descent", "3"), ("rate", "2")] {
        let o = qgs(&["stability", "--suite", suite, "--trials", trials, "--seed", "1"]);
        assert!(o.status.success(), "{suite}: {}", String::from_utf8_lossy(&o.stderr));
        let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        assert!(report.is_object());
    }
}

#[test]
fn perturbation_suite_reports_reference_bounds() {
    let o = qgs(&["stability", "--suite", "perturbation", "--trials", "100", "--seed", "9"]);
    assert!(o.status.success());
    let r: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["small_ok"], 100);
    assert_eq!(r["aligned_ascent"], 100);
    assert_eq!(r["reference_bound_zero"], 1.0);
}

#[test]
fn bounds_suite_rejects_multi_output_networks() {
    let o = qgs(&["stability", "--suite", "bounds", "--trials", "5", "--t", "2"]);
    assert_eq!(o.status.code(), Some(1));
}
