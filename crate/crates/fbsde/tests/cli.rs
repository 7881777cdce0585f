use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    p.pop();
    p.pop();
    p.push("target");
    p.push(if cfg!(debug_assertions) { "debug" } else { "release" });
    p.push("fbsde");
    p
}

fn specs_dir() -> PathBuf {
    let mut p = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    p.pop();
    p.pop();
    p.push("specs");
    p
}

fn run(args: &[&str], cache: &Path) -> (Value, i32) {
    let out = Command::new(bin())
        .args(args)
        .env("FBSDE_CACHE_DIR", cache)
        .output()
        .expect("binary runs");
    let code = out.status.code().unwrap_or(-1);
    let stdout = String::from_utf8(out.stdout).unwrap();
    let report: Value = serde_json::from_str(&stdout).unwrap_or(Value::Null);
    (report, code)
}

fn without_meta(mut v: Value) -> Value {
    v.as_object_mut().map(|m| m.remove("meta"));
    v
}

#[test]
fn psi_report_shape() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-psi");
    let (rep, code) = run(&["psi", "--p", "2"], &tmp);
    assert_eq!(code, 0);
    let r = &rep["result"];
    assert!((r["psi1"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!((r["psi2"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert_eq!(rep["command"], "psi");
    assert!(rep["meta"]["timestamp_unix"].is_u64());
}

#[test]
fn classify_zero_spec_solvable() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-zero");
    let spec = specs_dir().join("zero.json");
    let (rep, code) = run(&["classify", spec.to_str().unwrap()], &tmp);
    assert_eq!(code, 0);
    assert_eq!(rep["result"]["verdict"], "SolvableAllT");
    assert!(rep["spec_hash"].as_str().unwrap().len() == 64);
}

#[test]
fn dominate_quadratic_blows_up_at_one() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-quad");
    let spec = specs_dir().join("quadratic.json");
    let (rep, code) = run(&["dominate", spec.to_str().unwrap(), "--T", "2"], &tmp);
    assert_eq!(code, 0);
    let ev = &rep["result"]["event"];
    assert_eq!(ev["kind"], "blow_up");
    assert!((ev["t_star"].as_f64().unwrap() - 1.0).abs() < 1e-2);
}

#[test]
fn reports_are_deterministic_modulo_meta() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-det");
    let spec = specs_dir().join("zero.json");
    let (a, _) = run(&["classify", spec.to_str().unwrap()], &tmp);
    let (b, _) = run(&["classify", spec.to_str().unwrap()], &tmp);
    assert_eq!(
        serde_json::to_string(&without_meta(a)).unwrap(),
        serde_json::to_string(&without_meta(b)).unwrap()
    );
}

#[test]
fn solve_uses_field_cache() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-cache");
    let _ = std::fs::remove_dir_all(&tmp);
    let spec = specs_dir().join("coupled_linear.json");
    let args = ["solve", spec.to_str().unwrap(), "--dt", "0.05", "--dx", "0.2"];
    let (first, code) = run(&args, &tmp);
    assert_eq!(code, 0);
    assert_eq!(first["result"]["cached"], false);
    let (second, _) = run(&args, &tmp);
    assert_eq!(second["result"]["cached"], true);
    assert_eq!(first["result"]["y0"], second["result"]["y0"]);
    // --no-cache bypasses the stored field.
    let mut no_cache: Vec<&str> = args.to_vec();
    no_cache.push("--no-cache");
    let (third, _) = run(&no_cache, &tmp);
    assert_eq!(third["result"]["cached"], false);
}

#[test]
fn errors_exit_one_with_error_object() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-err");
    let (rep, code) = run(&["classify", "/nonexistent/path.json"], &tmp);
    assert_eq!(code, 1);
    assert!(rep["error"].as_str().is_some());
    assert!(rep.get("result").is_none());
}

#[test]
fn usage_errors_exit_two() {
    let out = Command::new(bin()).arg("frobnicate").output().expect("binary runs");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn oracle_matches_backward_ode() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-oracle");
    let spec = specs_dir().join("coupled_linear.json");
    let (rep, code) = run(&["oracle", spec.to_str().unwrap(), "--T", "1"], &tmp);
    assert_eq!(code, 0);
    let y = rep["result"]["yhat0"].as_f64().unwrap();
    assert!((y - 0.4378254606397645).abs() < 1e-9);
    assert!(rep["result"]["meanX_T"].as_f64().unwrap() > 0.0);
}

#[test]
fn batch_classify_covers_directory() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-batch");
    let dir = specs_dir();
    let (rep, code) = run(&["classify", "--batch", dir.to_str().unwrap()], &tmp);
    assert_eq!(code, 0);
    let items = rep["result"]["specs"].as_array().unwrap();
    assert!(items.len() >= 4);
    for item in items {
        assert!(item["classification"].is_object() || item["error"].is_string());
    }
}

#[test]
fn emit_csv_has_header_and_rows() {
    let tmp = std::env::temp_dir().join("fbsde-cli-test-csv");
    let _ = std::fs::create_dir_all(&tmp);
    let csv = tmp.join("dom.csv");
    let spec = specs_dir().join("quadratic.json");
    let (_, code) = run(
        &["dominate", spec.to_str().unwrap(), "--T", "0.5", "--emit-csv", csv.to_str().unwrap()],
        &tmp,
    );
    assert_eq!(code, 0);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,y_upper,y_lower"));
    assert!(lines.count() > 10);
}
