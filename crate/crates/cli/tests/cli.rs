use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::Value;

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(&p, body).unwrap();
    p
}

fn ddsde(cmd: &str, cfg: &Path, out: &Path) -> (i32, String) {
    let o = Command::new(env!("CARGO_BIN_EXE_ddsde")).args([cmd, "-c"]).arg(cfg).arg("-o").arg(out).output().unwrap();
    (o.status.code().unwrap(), String::from_utf8_lossy(&o.stderr).into_owned())
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

const SMALL_OU: &str = r#"{
  "model": {"kind": "mean-field-ou", "a": 0.5},
  "mu": {"atoms": [[0.0]]},
  "nu": {"atoms": [[1.0]]},
  "grid": {"horizon": 1.0, "n_steps": 50},
  "n_paths": 4000,
  "seed": 3,
  "decay": {"times": [0.02, 0.08, 0.32], "dt": 0.01}
}"#;

#[test]
fn malformed_config_exits_1_without_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    for body in ["{ not json", r#"{"model": {"kind": "nope"}}"#, &SMALL_OU.replace("\"seed\": 3", "\"seed\": 3, \"t\": 0.013")] {
        let cfg = write_config(dir.path(), body);
        let (code, err) = ddsde("estimate-derivative", &cfg, &out);
        assert_eq!(code, 1, "{err}");
        assert!(err.contains("error"));
        assert!(!out.exists());
    }
    let no_nu = SMALL_OU.replace(r#""nu": {"atoms": [[1.0]]},"#, "");
    let cfg = write_config(dir.path(), &no_nu);
    assert_eq!(ddsde("estimate-derivative", &cfg, &out).0, 1);
    assert!(!out.exists());
}

#[test]
fn estimate_writes_stamped_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_OU);
    let out = dir.path().join("out");
    let (code, err) = ddsde("estimate-derivative", &cfg, &out);
    assert_eq!(code, 0, "{err}");
    let est = read_json(&out.join("estimate.json"));
    let echoed = read_json(&out.join("config.json"));
    let run = read_json(&out.join("run.json"));
    assert_eq!(est["config_hash"], run["config_hash"]);
    assert_eq!(est["seed"], 3);
    assert_eq!(echoed["picard"]["lambda"], 10.0);
    assert_eq!(echoed["fd_eps"], serde_json::json!([0.1, 0.05, 0.025]));
    let v = est["value"].as_f64().unwrap();
    assert!((v - (-0.5f64).exp()).abs() < 4.0 * est["stderr"].as_f64().unwrap() + 0.02);
    assert!(est.get("started_unix").is_none());
    let csv = std::fs::read_to_string(out.join("estimate.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().contains(est["config_hash"].as_str().unwrap()));

    // The echoed config reproduces the same hash and bytes.
    let out2 = dir.path().join("again");
    assert_eq!(ddsde("estimate-derivative", &out.join("config.json"), &out2).0, 0);
    assert_eq!(std::fs::read(out.join("estimate.json")).unwrap(), std::fs::read(out2.join("estimate.json")).unwrap());
}

#[test]
fn solve_flow_and_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_OU);
    let out = dir.path().join("flow");
    assert_eq!(ddsde("solve-flow", &cfg, &out).0, 0);
    let csv = std::fs::read_to_string(out.join("flow.csv")).unwrap();
    assert!(csv.starts_with("time,atom,x0,weight"));
    assert!(read_json(&out.join("flow.json"))["trace"]["converged"].as_bool().unwrap());

    let strict = SMALL_OU.replace("\"seed\": 3,", "\"seed\": 3, \"picard\": {\"max_iter\": 1},");
    let cfg = write_config(dir.path(), &strict);
    let out = dir.path().join("stuck");
    let (code, err) = ddsde("solve-flow", &cfg, &out);
    assert_eq!(code, 3, "{err}");
    assert!(!read_json(&out.join("flow.json"))["converged"].as_bool().unwrap());
}

#[test]
fn validate_model_flags_the_quadratic_drift() {
    let dir = tempfile::tempdir().unwrap();
    let quad = r#"{
      "model": {"kind": "quadratic"},
      "mu": {"atoms": [[0.0]]},
      "grid": {"horizon": 1.0, "n_steps": 20},
      "n_paths": 100,
      "seed": 1,
      "probe": {"extra_measures": [{"atoms": [[100.0]], "weights": [1.0]}]}
    }"#;
    let cfg = write_config(dir.path(), quad);
    let out = dir.path().join("v");
    let (code, err) = ddsde("validate-model", &cfg, &out);
    assert_eq!(code, 2, "{err}");
    let v = read_json(&out.join("validation.json"));
    assert!(!v["pass"].as_bool().unwrap());
    assert!(v["structural"]["modulus_ratio"].as_f64().unwrap() > 1.0 || v["structural"]["growth_ratio"].as_f64().unwrap() > 1.0);

    let cfg = write_config(dir.path(), SMALL_OU);
    let out = dir.path().join("ou");
    let (code, err) = ddsde("validate-model", &cfg, &out);
    let v = read_json(&out.join("validation.json"));
    // The statistical checks are pointwise 3-sigma; at this size only sanity is asserted.
    assert_eq!(code == 0, v["pass"].as_bool().unwrap(), "{err}");
    assert!(v["structural"]["pass"].as_bool().unwrap());
    assert!(v["flow"]["worst_ratio"].as_f64().unwrap() < 2.0);
}

#[test]
fn compare_and_decay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL_OU);
    let out = dir.path().join("cmp");
    let (code, err) = ddsde("compare-oracles", &cfg, &out);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(out.join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    assert!(std::fs::read_to_string(out.join("compare.md")).unwrap().contains("PASS"));

    let out = dir.path().join("decay");
    let (code, err) = ddsde("decay-probe", &cfg, &out);
    assert_eq!(code, 0, "{err}");
    let d = read_json(&out.join("decay.json"));
    assert!(d["exponent"].as_f64().unwrap() >= 0.5);
    assert_eq!(std::fs::read_to_string(out.join("decay.csv")).unwrap().lines().count(), 4);
}
