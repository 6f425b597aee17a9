use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tiltglm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tiltglm")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_csv(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn assert_single_error_line(o: &Output, kind: &str) {
    let e = stderr(o);
    let lines: Vec<&str> = e.lines().collect();
    assert_eq!(lines.len(), 1, "{e}");
    assert!(lines[0].starts_with(&format!("error[{kind}]: ")), "{e}");
}

#[test]
fn fit_poisson_writes_json_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(dir.path(), "d.csv", "y,x\n0,0.1\n1,0.4\n3,1.2\n2,0.9\n5,1.8\n1,0.2\n4,1.5\n");
    let out = dir.path().join("fit.json");
    let o = tiltglm(&[
        "--quiet",
        "--out",
        out.to_str().unwrap(),
        "fit",
        "--family",
        "poisson",
        "--data",
        &data,
        "--response",
        "y",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["link"], "log");
    assert_eq!(v["converged"], true);
    assert_eq!(v["coefficients"][0]["name"], "(Intercept)");
    assert_eq!(v["coefficients"][1]["name"], "x");
    assert!(v["score_norm"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn fit_semiparametric_reports_reference_distribution() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(dir.path(), "d.csv", "y,g\n0,0\n1,1\n1,1\n2,0\n");
    let o = tiltglm(&["fit", "--family", "semiparametric", "--link", "identity", "--data", &data, "--response", "y"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let ll = v["loglik"].as_f64().unwrap();
    assert!((ll + 6.0 * 2f64.ln()).abs() < 1e-8);
    let w: Vec<f64> = v["reference_distribution"]["weights"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(w.len(), 3);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn input_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiltglm(&["fit", "--family", "poisson", "--data", "/nonexistent.csv", "--response", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert_single_error_line(&o, "input");

    let data = write_csv(dir.path(), "bad.csv", "y,x\n1,2\nfoo,3\n");
    let o = tiltglm(&["fit", "--family", "normal", "--data", &data, "--response", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert_single_error_line(&o, "input");

    let data = write_csv(dir.path(), "neg.csv", "y,x\n-1,2\n1,3\n2,1\n0,0\n");
    let o = tiltglm(&["fit", "--family", "poisson", "--data", &data, "--response", "y"]);
    assert_eq!(o.status.code(), Some(1));
    assert_single_error_line(&o, "input");

    let o = tiltglm(&["--threads", "zero", "scenarios"]);
    assert_eq!(o.status.code(), Some(1));
    assert_single_error_line(&o, "input");

    let o = tiltglm(&["simulate", "--scenario", "gaussian-n10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("exponential-n66"));
}

#[test]
fn non_convergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(dir.path(), "d.csv", "y,x\n0,0.1\n1,0.4\n3,1.2\n2,0.9\n5,1.8\n1,0.2\n4,1.5\n");
    let o = tiltglm(&["fit", "--family", "poisson", "--max-iter", "1", "--data", &data, "--response", "y"]);
    assert_eq!(o.status.code(), Some(2));
    assert_single_error_line(&o, "convergence");
}

#[test]
fn verification_failure_exits_three() {
    let o = tiltglm(&["verify", "--checks", "projection", "--configs", "20", "--corrupt-variance", "1.2"]);
    assert_eq!(o.status.code(), Some(3));
    assert_single_error_line(&o, "verification");
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));

    let o = tiltglm(&["verify", "--checks", "projection,tilt", "--configs", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_writes_csv_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("runs");
    let o = tiltglm(&[
        "--quiet",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
        "simulate",
        "--scenario",
        "exponential-n33",
        "--reps",
        "20",
        "--estimators",
        "sp,mle,quasi",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(o.stdout.is_empty());
    let csv = fs::read_to_string(out.join("exponential-n33.csv")).unwrap();
    assert!(csv.starts_with("scenario,parameter,estimator,rrmse,ratio,reps,failures"));
    assert_eq!(csv.lines().count(), 1 + 3 * 3);
    let table = fs::read_to_string(out.join("exponential-n33.txt")).unwrap();
    assert!(table.contains("SP/MLE"));
}

#[test]
fn thread_count_does_not_change_output() {
    let a = tiltglm(&["--threads", "1", "--seed", "9", "verify", "--configs", "30", "--n-mc", "4000"]);
    let b = tiltglm(&["--threads", "4", "--seed", "9", "verify", "--configs", "30", "--n-mc", "4000"]);
    assert!(a.status.success() && b.status.success());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn intercept_only_fits_give_log_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(dir.path(), "d.csv", "y\n1\n2\n3\n");
    for family in ["poisson", "semiparametric"] {
        let o = tiltglm(&["fit", "--family", family, "--link", "log", "--data", &data, "--response", "y"]);
        assert!(o.status.success(), "{family}: {}", stderr(&o));
        let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
        let b0 = v["coefficients"][0]["estimate"].as_f64().unwrap();
        assert!((b0 - 2f64.ln()).abs() < 1e-8, "{family}: {b0}");
        if family == "semiparametric" {
            assert_eq!(v["reference_distribution"]["atoms"], serde_json::json!([1.0, 2.0, 3.0]));
        }
    }
}

#[test]
fn missing_response_column_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_csv(dir.path(), "d.csv", "y,x\n1,0\n2,1\n3,0\n");
    let o = tiltglm(&["fit", "--family", "poisson", "--data", &data, "--response", "count"]);
    assert_eq!(o.status.code(), Some(1));
    assert_single_error_line(&o, "input");
    assert!(stderr(&o).contains("'count'"));
}
