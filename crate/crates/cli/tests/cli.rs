use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn urank(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_urank")).args(args).current_dir(dir).output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write(dir: &Path, name: &str, body: &str) {
    std::fs::write(dir.join(name), body).unwrap();
}

#[test]
fn fit_toy_pair_reaches_zero_objective() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "toy.csv", "x1,y\n0,0\n1,1\n");
    let v = json_of(&urank(&["fit", "--data", "toy.csv", "--loss", "hinge", "--lambda", "0"], tmp.path()));
    let r = &v["result"];
    assert_eq!(r["objective"].as_f64().unwrap(), 0.0);
    assert!(r["theta_hat"][0].as_f64().unwrap() >= 1.0);
    assert_eq!(r["converged"], Value::Bool(true));
    assert_eq!(v["config"]["lambda"], "0");
}

#[test]
fn fit_huge_lambda_gives_empty_support() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = urank(&["simulate", "--theta0", "1,-1,0", "--n", "40", "--seed", "5", "--out", "d.csv"], tmp.path());
    assert!(sim.status.success());
    let v = json_of(&urank(&["fit", "--data", "d.csv", "--lambda", "1e9"], tmp.path()));
    assert_eq!(v["result"]["support"].as_array().unwrap().len(), 0);
    assert!(v["result"]["theta_hat"].as_array().unwrap().iter().all(|t| t.as_f64() == Some(0.0)));
}

#[test]
fn fit_writes_out_file_with_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    urank(&["simulate", "--theta0", "1,0,0", "--n", "30", "--out", "d.csv"], tmp.path());
    write(tmp.path(), "c.json", r#"{"lambda": 0.01, "weights": "normalize", "seed": 4}"#);
    let out = urank(&["fit", "--config", "c.json", "--data", "d.csv", "--weights", "none", "--out", "r.json"], tmp.path());
    assert!(out.status.success());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["config"]["lambda"], 0.01);
    // flag beats file
    assert_eq!(v["config"]["weights"], "none");
    assert_eq!(v["config"]["seed"], 4);
    assert!(v["threads"].as_u64().unwrap() >= 1);
    assert_eq!(v["result"]["basis"]["name"], "linear");
}

#[test]
fn fit_missing_y_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "bad.csv", "x1,x2\n1,2\n3,4\n");
    let out = urank(&["fit", "--data", "bad.csv", "--lambda", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_csv_reports_line() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "bad.csv", "x1,y\n1,2\n3,oops\n");
    let out = urank(&["fit", "--data", "bad.csv", "--lambda", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn unknown_config_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "c.json", r#"{"solver": {"tolerance": 1e-6}}"#);
    write(tmp.path(), "toy.csv", "x1,y\n0,0\n1,1\n");
    let out = urank(&["fit", "--config", "c.json", "--data", "toy.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("solver.tolerance"), "{err}");
}

#[test]
fn tune_reports_c_hat_for_scalar_example() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "t.csv", "x1,y\n1,0\n2,0\n4,0\n");
    let v = json_of(&urank(&["tune", "--data", "t.csv"], tmp.path()));
    // oracle: sqrt((1+9+4)*2/6)
    let expected = (28.0f64 / 6.0).sqrt();
    assert!((v["result"]["C_hat"].as_f64().unwrap() - expected).abs() < 1e-12);
    assert!((expected - 2.1602).abs() < 1e-4);
}

#[test]
fn tune_with_cv_grid() {
    let tmp = tempfile::tempdir().unwrap();
    urank(&["simulate", "--theta0", "1,0", "--n", "30", "--out", "d.csv"], tmp.path());
    let v = json_of(&urank(&["tune", "--data", "d.csv", "--grid", "logspace(-3,-1,3)", "--folds", "3"], tmp.path()));
    let table = v["result"]["cv"]["table"].as_array().unwrap();
    assert_eq!(table.len(), 3);
    assert!(v["result"]["lambda_hat"].as_f64().unwrap() > 0.0);
}

#[test]
fn simulate_noiseless_copies_first_feature() {
    let tmp = tempfile::tempdir().unwrap();
    let out = urank(&["simulate", "--theta0", "1,0,0", "--sigma", "0", "--n", "25", "--seed", "9"], tmp.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# {"));
    assert_eq!(lines.next().unwrap(), "x1,x2,x3,y");
    let mut count = 0;
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        assert_eq!(f[0], f[3]);
        count += 1;
    }
    assert_eq!(count, 25);
}

#[test]
fn simulate_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let a = urank(&["simulate", "--theta0", "1,-2", "--n", "10", "--seed", "3"], tmp.path());
    let b = urank(&["simulate", "--theta0", "1,-2", "--n", "10", "--seed", "3"], tmp.path());
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn rates_single_point_grid_is_flagged() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "r.json",
        r#"{"n_grid": [40], "m_grid": [4], "s_true": 2, "replications": 2, "mc_pairs": 2000,
            "lambda_mode": {"mode": "fixed", "value": 0.05}}"#,
    );
    let out = urank(&["rates", "--config", "r.json", "--out-dir", "out"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("out/summary.json")).unwrap()).unwrap();
    let slope = &summary["result"]["slopes"][0];
    assert!(slope["slope"].is_null());
    assert_eq!(slope["flag"], "insufficient grid");
    let records = std::fs::read_to_string(tmp.path().join("out/records.csv")).unwrap();
    assert!(records.starts_with("# {"));
    assert_eq!(records.lines().count(), 2 + 2);
    assert!(tmp.path().join("out/medians.csv").exists());
}

#[test]
fn rates_unknown_field_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "r.json", r#"{"n_grids": [40]}"#);
    let out = urank(&["rates", "--config", "r.json", "--out-dir", "out"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_grids"));
}

#[test]
fn rank_labels_follow_score_sign() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "toy.csv", "x1,y\n0,0\n1,1\n");
    let out = urank(&["fit", "--data", "toy.csv", "--loss", "hinge", "--lambda", "0", "--out", "fit.json"], tmp.path());
    assert!(out.status.success());
    write(tmp.path(), "pairs.csv", "x1,x1p\n2,1\n1,2\n3,3\n");
    let out = urank(&["rank", "--model", "fit.json", "--pairs", "pairs.csv"], tmp.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let labels: Vec<&str> = text.lines().skip(2).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(labels, ["first", "second", "tie"]);
}

#[test]
fn rank_zero_theta_gives_ties() {
    let tmp = tempfile::tempdir().unwrap();
    urank(&["simulate", "--theta0", "1,0", "--n", "20", "--out", "d.csv"], tmp.path());
    urank(&["fit", "--data", "d.csv", "--lambda", "1e9", "--out", "fit.json"], tmp.path());
    write(tmp.path(), "pairs.csv", "1,2,3,4\n-1,0,5,2\n");
    let out = urank(&["rank", "--model", "fit.json", "--pairs", "pairs.csv"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().skip(2).all(|l| l.ends_with(",tie")));
}

#[test]
fn rank_dimension_mismatch_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), "toy.csv", "x1,y\n0,0\n1,1\n");
    urank(&["fit", "--data", "toy.csv", "--lambda", "0", "--out", "fit.json"], tmp.path());
    write(tmp.path(), "pairs.csv", "1,2,3\n");
    let out = urank(&["rank", "--model", "fit.json", "--pairs", "pairs.csv"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn diagnose_cone_search_above_limit_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "d.json",
        r#"{"model": {"theta0": [1, 0], "v": [[1, 0], [0, 1]], "sigma_noise": 0.5},
            "d_ambient": 31, "supports": [[0]], "compatibility": "cone_search"}"#,
    );
    let out = urank(&["diagnose", "--config", "d.json"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn diagnose_identity_compatibility() {
    let tmp = tempfile::tempdir().unwrap();
    write(
        tmp.path(),
        "d.json",
        r#"{"model": {"theta0": [1, 0, 0], "v": [[1, 0, 0], [0, 1, 0], [0, 0, 1]], "sigma_noise": 0.7},
            "supports": [[0], [1, 2]], "margin_mc": 4000, "margin_thetas": 2}"#,
    );
    let v = json_of(&urank(&["diagnose", "--config", "d.json"], tmp.path()));
    // closed-form Gram is 2I, so A(S) = sqrt(2) for every S
    for c in v["result"]["compatibility"].as_array().unwrap() {
        assert!((c["A"].as_f64().unwrap() - 2f64.sqrt()).abs() < 1e-6);
    }
    assert!(v["result"]["margin_check"]["entries"].as_array().unwrap().len() == 2);
}
