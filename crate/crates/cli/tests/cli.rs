use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clicktomo"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn simulate(dir: &Path, pixels: &str) {
    ok(&["simulate", "--pixels", pixels, "--seed", "3", "--pulses", "5000", "--output", dir.to_str().unwrap()]);
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn simulate_writes_normalized_measurements_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4");
    for name in ["detector.json", "probe_plan.json", "config.json", "probes.csv", "measurements.csv"] {
        assert!(dir.path().join(name).is_file(), "{name} missing");
    }
    let rows = csv_rows(&dir.path().join("measurements.csv"));
    assert!(!rows.is_empty());
    for r in &rows {
        let s: f64 = r[1..].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert_eq!(r.len(), 1 + 5);
    }
    let meta = json(&dir.path().join("measurements.csv.meta.json"));
    assert_eq!(meta["command"], "simulate");
    assert_eq!(meta["seed"], 3);
    assert_eq!(meta["config_sha256"].as_str().unwrap().len(), 64);
    assert!(meta["tool_version"].is_string());
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        simulate(d, "4");
        ok(&["tomo", "--seed", "3", "--output", d.to_str().unwrap(), "--threads", "2"]);
        ok(&["reconstruct", "--input", "coherent", "--mean", "2", "--seed", "3", "--pulses", "5000", "--output", d.to_str().unwrap()]);
    }
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 15);
    for name in names {
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs between reruns");
    }
}

#[test]
fn tomo_reports_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4");
    let d = dir.path().to_str().unwrap();
    let stdout = ok(&["tomo", "--method", "both", "--seed", "3", "--output", d, "--gamma-sweep", "--gammas", "1e-5,1e-1"]);
    assert!(stdout.contains("relative error MDT vs SDT"));
    let stats = json(&dir.path().join("solver_stats.json"));
    assert!(stats["relative_error_mdt_vs_sdt"].as_f64().unwrap() < 0.5);
    for m in ["sdt", "mdt"] {
        assert_eq!(stats[m]["status"], "Converged");
        assert!(stats[m]["p_dark"].as_f64().unwrap() >= 0.0);
        assert!(stats[m]["relative_error_vs_truth"].is_number());
        let povm = csv_rows(&dir.path().join(format!("povm_{m}.csv")));
        for row in povm {
            assert!((row[1..].iter().sum::<f64>() - 1.0).abs() < 1e-8);
        }
    }
    assert!(stats["mdt"]["masked_fraction"].as_f64().is_some());
    let sweep = fs::read_to_string(dir.path().join("gamma_sweep.csv")).unwrap();
    assert!(sweep.starts_with("gamma,p_dark,"));
    assert_eq!(sweep.lines().count(), 3);
}

#[test]
fn single_method_writes_one_povm() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "3");
    ok(&["tomo", "--method", "sdt", "--seed", "3", "--output", dir.path().to_str().unwrap()]);
    assert!(dir.path().join("povm_sdt.csv").is_file());
    assert!(!dir.path().join("povm_mdt.csv").exists());
}

#[test]
fn empty_measurement_file_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "3");
    fs::write(dir.path().join("measurements.csv"), "").unwrap();
    let out = run(&["tomo", "--seed", "3", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("measurements.csv"), "{err}");
}

#[test]
fn vacuum_reconstructs_to_vacuum() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4");
    let d = dir.path().to_str().unwrap();
    ok(&["tomo", "--method", "mdt", "--seed", "3", "--output", d]);
    ok(&["reconstruct", "--input", "coherent", "--mean", "0", "--seed", "3", "--pulses", "2000", "--output", d]);
    let pnd = csv_rows(&dir.path().join("pnd.csv"));
    assert!(pnd[0][1] > 0.999, "{}", pnd[0][1]);
    let metrics = json(&dir.path().join("metrics.json"));
    assert!(metrics["fidelity"].as_f64().unwrap() > 0.999);
    assert!(metrics.get("std").is_none());
}

#[test]
fn repeat_adds_standard_deviations() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4");
    let d = dir.path().to_str().unwrap();
    ok(&["tomo", "--method", "mdt", "--seed", "3", "--output", d]);
    ok(&["reconstruct", "--input", "thermal", "--mean", "1", "--repeat", "3", "--seed", "3", "--pulses", "2000", "--output", d]);
    let pnd = fs::read_to_string(dir.path().join("pnd.csv")).unwrap();
    assert!(pnd.starts_with("k,probability,std\n"));
    let metrics = json(&dir.path().join("metrics.json"));
    for key in ["fidelity", "tvd", "g2", "g3", "mean"] {
        assert!(metrics[key].is_number(), "{key}");
        assert!(metrics["std"][key].as_f64().unwrap() >= 0.0, "{key}");
    }
    assert_eq!(metrics["repeat"], 3);
    let rows = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(rows.lines().count(), 4);
}

#[test]
fn missing_povm_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "3");
    let out = run(&["reconstruct", "--input", "coherent", "--mean", "1", "--seed", "3", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("povm_mdt.csv"));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["tomo", "--method", "xyz"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    // The seed is mandatory.
    let out = run(&["simulate", "--pixels", "3", "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("seed"));
    assert_eq!(run(&["simulate", "--seed", "1", "--gamma", "-1"]).status.code(), Some(1));
}

#[test]
fn iteration_cap_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4");
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 3, "solver": {"max_iter": 1}}"#).unwrap();
    let out = run(&["tomo", "--config", cfg.to_str().unwrap(), "--output", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_file_drives_simulation() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");
    let cfg = dir.path().join("cfg.json");
    let text = format!(
        r#"{{"detector": {{"n_pixels": 3}}, "probe": {{"alpha_max": 5}}, "pulses": 1000, "seed": 9, "output_dir": {:?}}}"#,
        out_dir.to_str().unwrap()
    );
    fs::write(&cfg, text).unwrap();
    ok(&["simulate", "--config", cfg.to_str().unwrap()]);
    let plan = json(&out_dir.join("probe_plan.json"));
    assert_eq!(plan["alpha_sq_values"].as_array().unwrap().len(), 5);
    let det = json(&out_dir.join("detector.json"));
    assert_eq!(det["n_pixels"], 3);
    // A flag overrides the config.
    ok(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "10"]);
    assert_eq!(json(&out_dir.join("measurements.csv.meta.json"))["seed"], 10);
}

#[test]
fn bench_writes_records_and_fits() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "bench", "--pixels", "3,4,5", "--repetitions", "1", "--pulses", "2000", "--seed", "1", "--budget", "1",
        "--output", dir.path().to_str().unwrap(),
    ]);
    assert!(stdout.contains("largest N within 1 GiB"));
    let records = fs::read_to_string(dir.path().join("scaling.csv")).unwrap();
    assert!(records.starts_with("n_pixels,method,time_s,mem_bytes,masked_fraction,M"));
    assert_eq!(records.lines().count(), 7);
    let fits = json(&dir.path().join("fits.json"));
    for key in ["time_sdt", "time_mdt", "memory_sdt", "memory_mdt"] {
        assert!(fits[key]["a"].as_f64().unwrap() > 0.0, "{key}");
    }
}

#[test]
fn lambda_sweep_lists_each_lambda() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "4");
    let d = dir.path().to_str().unwrap();
    ok(&["tomo", "--method", "mdt", "--seed", "3", "--output", d]);
    ok(&["sweep-lambda", "--lambdas", "0,0.02", "--means", "1", "--seed", "3", "--pulses", "2000", "--output", d]);
    let text = fs::read_to_string(dir.path().join("lambda_sweep.csv")).unwrap();
    assert!(text.starts_with("lambda,mean_fidelity,min_fidelity,max_iterations"));
    assert_eq!(text.lines().count(), 3);
    ok(&["sweep-gamma", "--gammas", "1e-3", "--seed", "3", "--output", d]);
    assert!(dir.path().join("gamma_sweep.csv.meta.json").is_file());
}
