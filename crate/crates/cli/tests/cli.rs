use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hetcggm_cli::io::{read_json, ResultFile, TruthFile};
use serde_json::Value;

fn hetcggm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetcggm"))
        .args(args)
        .env_remove("HETCGGM_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = hetcggm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, seed: &str) {
    ok(&[
        "simulate", "--setting", "s1", "--p", "4", "--q", "3", "--sizes", "40,40", "--seed", seed,
        "--out", s(dir),
    ]);
}

fn fit(data: &Path, out: &Path) {
    ok(&[
        "fit", "--y", s(&data.join("Y.csv")), "--x", s(&data.join("X.csv")), "--k", "3",
        "--lambda1", "0.1", "--lambda2", "0.1", "--lambda3", "0.3", "--out", s(out),
    ]);
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    simulate(&a, "5");
    simulate(&b, "5");
    simulate(&c, "6");
    for f in ["Y.csv", "X.csv", "labels.csv", "truth.json", "manifest.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert_ne!(fs::read(a.join("Y.csv")).unwrap(), fs::read(c.join("Y.csv")).unwrap());
    let y = fs::read_to_string(a.join("Y.csv")).unwrap();
    assert_eq!(y.lines().next(), Some("y1,y2,y3,y4"));
    assert_eq!(y.lines().count(), 81);
}

#[test]
fn fit_writes_result_and_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("fit"));
    simulate(&data, "1");
    fit(&data, &out);
    let v: Value = read_json(&out.join("result.json")).unwrap();
    for key in [
        "format_version", "k_hat", "pi", "groups", "assignment", "objective_trace", "hqc",
        "loglik", "df", "diagnostics", "warnings", "hyperparams", "seed", "wall_time_secs",
    ] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let r: ResultFile = read_json(&out.join("result.json")).unwrap();
    assert_eq!(r.groups.len(), r.k_hat);
    assert_eq!(r.assignment.len(), 80);
    assert!((r.pi.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    for (k, g) in r.params().unwrap().iter().enumerate() {
        assert_eq!((g.gamma.nrows(), g.gamma.ncols()), (4, 4));
        assert!(hetcggm::model::check_spd(&g.theta));
        let edges = fs::read_to_string(out.join(format!("edges_{}.csv", k + 1))).unwrap();
        assert_eq!(edges.lines().next(), Some("j,m,value"));
    }
    // round trip through serde keeps every value
    let again: ResultFile = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again.params().unwrap(), r.params().unwrap());
}

#[test]
fn evaluate_truth_against_itself_is_perfect() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("fit"));
    simulate(&data, "2");
    fit(&data, &out);
    // replace the estimates with the truth
    let truth: Value = read_json(&data.join("truth.json")).unwrap();
    let labels: Vec<usize> = fs::read_to_string(data.join("labels.csv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.parse().unwrap())
        .collect();
    let mut result: Value = read_json(&out.join("result.json")).unwrap();
    result["groups"] = truth["groups"].clone();
    result["k_hat"] = 2.into();
    result["pi"] = serde_json::json!([0.5, 0.5]);
    result["assignment"] = serde_json::json!(labels);
    let injected = tmp.path().join("injected.json");
    fs::write(&injected, serde_json::to_string(&result).unwrap()).unwrap();

    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate", "--result", s(&injected), "--truth", s(&data.join("truth.json")), "--labels",
        s(&data.join("labels.csv")), "--out", s(&eval),
    ]);
    let m: Value = read_json(&eval.join("metrics.json")).unwrap();
    assert_eq!(m["rmse_theta"], 0.0);
    assert_eq!(m["rmse_gamma"], 0.0);
    assert_eq!(m["tpr_theta"], 1.0);
    assert_eq!(m["fpr_theta"], 0.0);
    assert_eq!(m["tpr_gamma"], 1.0);
    assert_eq!(m["fpr_gamma"], 0.0);
    assert_eq!(m["ari"], 1.0);
    assert_eq!(m["k_hat"], 2);
}

#[test]
fn evaluate_rejects_label_length_mismatch() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("fit"));
    simulate(&data, "3");
    fit(&data, &out);
    let short = tmp.path().join("short.csv");
    fs::write(&short, "label\n0\n1\n").unwrap();
    let res = hetcggm(&[
        "evaluate", "--result", s(&out.join("result.json")), "--truth", s(&data.join("truth.json")),
        "--labels", s(&short), "--out", s(&tmp.path().join("eval")),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("error:"));
}

#[test]
fn tune_writes_table_and_best_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let (data, out) = (tmp.path().join("data"), tmp.path().join("tune"));
    simulate(&data, "4");
    ok(&[
        "tune", "--y", s(&data.join("Y.csv")), "--x", s(&data.join("X.csv")), "--k", "3",
        "--grid1", "0.05:0.2:2", "--grid2", "0.1:0.1:1", "--grid3", "0.1:0.5:3", "--out", s(&out),
    ]);
    let table = fs::read_to_string(out.join("hqc_table.csv")).unwrap();
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("lambda1,lambda2,lambda3,hqc,k_hat"));
    assert_eq!(lines.count(), 6);
    let best: ResultFile = read_json(&out.join("best/result.json")).unwrap();
    let min = table
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(3)?.parse::<f64>().ok())
        .fold(f64::INFINITY, f64::min);
    assert_eq!(best.hqc, Some(min));
}

#[test]
fn benchmark_writes_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bench");
    ok(&[
        "--threads", "2", "benchmark", "--setting", "s1", "--p", "4", "--q", "3", "--sizes",
        "40,40", "--replicates", "2", "--k", "3", "--grid1", "0.1:0.1:1", "--grid2", "0.1:0.1:1",
        "--grid3", "0.1:0.5:2", "--out", s(&out),
    ]);
    let reps = fs::read_to_string(out.join("replicates.csv")).unwrap();
    assert_eq!(reps.lines().count(), 3);
    assert!(reps.lines().next().unwrap().starts_with("replicate,seed,status,lambda1"));
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "metric,mean,sd,cell,count");
    assert_eq!(rows.len(), 11);
    assert!(rows[1].starts_with("rmse_theta,"));
}

#[test]
fn usage_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    for args in [
        vec!["benchmark", "--setting", "s1", "--p", "4", "--q", "3", "--sizes", "5,5", "--replicates", "0", "--out", out],
        vec!["fit", "--y", "Y.csv", "--out", out],
        vec!["fit", "--y", "Y.csv", "--x", "X.csv", "--k", "0", "--out", out],
    ] {
        assert_eq!(hetcggm(&args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn invalid_setting_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let res = hetcggm(&[
        "simulate", "--setting", "s2", "--p", "15", "--q", "2", "--sizes", "10", "--out",
        s(tmp.path()),
    ]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("divisible by 10"));
}

#[test]
fn truth_file_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    simulate(tmp.path(), "9");
    let truth: TruthFile = read_json(&tmp.path().join("truth.json")).unwrap();
    let params = truth.params().unwrap();
    assert_eq!(params.len(), 2);
    let text = serde_json::to_string(&truth).unwrap();
    let back: TruthFile = serde_json::from_str(&text).unwrap();
    assert_eq!(back.params().unwrap(), params);
}
