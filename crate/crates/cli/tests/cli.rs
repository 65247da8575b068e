use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const FEEDER: &str = r#"{
  "name": "path3",
  "base": {"voltage_kv": 12.47},
  "buses": [
    {"index": 0},
    {"index": 1, "p_load": 0.6, "q_load": 0.29},
    {"index": 2, "p_load": 0.5, "q_load": 0.24}
  ],
  "lines": [
    {"from": 0, "to": 1, "r": 0.02, "x": 0.03, "s_max": 5.0},
    {"from": 1, "to": 2, "r": 0.015, "x": 0.02, "s_max": 5.0}
  ],
  "pv_units": [{"bus": 2, "rating_mw": 0.8, "inverter_mva": 0.9, "pf_min": 0.9}],
  "diesel_units": [
    {"bus": 1, "p_min": 0.0, "p_max": 0.3, "cost_linear": 30.0, "cost_quadratic": 15.0}
  ],
  "prices": {"block": 37.0, "buy": 45.0, "sell": 19.0, "pv": [35.0]},
  "voltage_regions": {
    "a_lower": 0.9801, "a_upper": 1.0201,
    "b_lower": 0.9409, "b_upper": 1.0609,
    "substation_lower": 0.9409, "substation_upper": 1.0609
  }
}"#;

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(config: Value) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("feeder.json"), FEEDER).unwrap();
        let mut config = config;
        config["feeder"] = json!("feeder.json");
        config["output_dir"] = json!(dir.path().join("out"));
        fs::write(
            dir.path().join("config.json"),
            serde_json::to_string_pretty(&config).unwrap(),
        )
        .unwrap();
        Self { dir }
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("config.json")
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join("out").join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_feeder-dispatch"));
        cmd.args(&args[..1])
            .arg("--config")
            .arg(self.config())
            .args(&args[1..]);
        cmd.output().unwrap()
    }
}

fn short(algorithm: &str) -> Value {
    json!({
        "algorithm": algorithm,
        "alpha": 0.05,
        "stop": {"max_iters": 1500, "min_iters": 200, "window": 100, "tol": 1e-3},
        "eval": {"n_samples": 50, "histogram_buses": [2]}
    })
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn run_writes_trace_and_summary() {
    let ws = Workspace::new(short("pda"));
    let o = ws.run(&["run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = read_json(&ws.out("summary.json"));
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["algorithm"], "pda");
    assert_eq!(summary["converged"], true);
    assert_eq!(summary["max_iters_warning"], false);
    assert_eq!(summary["policy"]["kind"], "probabilistic");

    let trace = fs::read_to_string(ws.out("trace.csv")).unwrap();
    let mut lines = trace.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(
        &header[..8],
        &["k", "status", "choice", "indicator", "slot_cost", "v0a", "p0a", "p_d_1"]
    );
    assert!(header.contains(&"nu") && header.contains(&"avg_nu"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows[0].starts_with("0,"));
    assert_eq!(rows.len() as u64, summary["iterations"].as_u64().unwrap() + 1);
}

#[test]
fn missing_alpha_is_named() {
    let mut cfg = short("pda");
    cfg.as_object_mut().unwrap().remove("alpha");
    let ws = Workspace::new(cfg);
    let o = ws.run(&["run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alpha required"), "{}", stderr(&o));
}

#[test]
fn unconverged_run_exits_two_with_warning() {
    let ws = Workspace::new(short("ada"));
    let o = ws.run(&["run", "--max-iters", "10"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("max_iters"));
    let summary = read_json(&ws.out("summary.json"));
    assert_eq!(summary["max_iters_warning"], true);
    assert_eq!(summary["iterations"], 10);
}

#[test]
fn evaluate_writes_reports() {
    let ws = Workspace::new(short("ada"));
    assert!(ws.run(&["run"]).status.success());
    let o = ws.run(&["evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = read_json(&ws.out("eval.json"));
    assert_eq!(eval["schema_version"], 1);
    assert_eq!(eval["n_samples"], 50);
    assert!(eval["expected_cost"].as_f64().unwrap() > 0.0);
    assert!(eval["max_hard_violation"].as_f64().unwrap() <= 1e-6);
    let hist = fs::read_to_string(ws.out("hist_bus2.csv")).unwrap();
    let total: u64 = hist
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<u64>().unwrap())
        .sum();
    assert_eq!(total, 50);
    let per_bus = fs::read_to_string(ws.out("perbus_violations.csv")).unwrap();
    assert_eq!(per_bus.lines().count(), 3);
}

#[test]
fn evaluate_rejects_zero_samples() {
    let ws = Workspace::new(short("ada"));
    assert!(ws.run(&["run"]).status.success());
    let o = ws.run(&["evaluate", "--n-samples", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n_samples"));
}

#[test]
fn evaluations_with_one_seed_agree() {
    let ws = Workspace::new(short("pda"));
    assert!(ws.run(&["run"]).status.success());
    assert!(ws.run(&["evaluate"]).status.success());
    let first = fs::read(ws.out("eval.json")).unwrap();
    assert!(ws.run(&["evaluate"]).status.success());
    assert_eq!(first, fs::read(ws.out("eval.json")).unwrap());
}

#[test]
fn summary_schema_mismatch_is_refused() {
    let ws = Workspace::new(short("ada"));
    assert!(ws.run(&["run"]).status.success());
    let path = ws.out("summary.json");
    let mut summary = read_json(&path);
    summary["schema_version"] = json!(99);
    fs::write(&path, summary.to_string()).unwrap();
    let o = ws.run(&["evaluate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("schema_version"), "{}", stderr(&o));
}

#[test]
fn oracle_writes_solution() {
    let ws = Workspace::new(short("ada"));
    let o = ws.run(&["oracle", "--k", "5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let oracle = read_json(&ws.out("oracle.json"));
    assert_eq!(oracle["k"], 5);
    assert_eq!(oracle["mean_voltage"].as_array().unwrap().len(), 2);
    assert!(oracle["cost"].as_f64().unwrap().is_finite());
    assert_eq!(oracle["z"]["p_d"].as_array().unwrap().len(), 1);
}

#[test]
fn oracle_rejects_bad_k() {
    let ws = Workspace::new(short("ada"));
    assert_eq!(ws.run(&["oracle", "--k", "0"]).status.code(), Some(1));
    // clap refuses a negative count before the command runs
    assert_eq!(ws.run(&["oracle", "--k", "-3"]).status.code(), Some(1));
}

#[test]
fn scenario_dump_rows() {
    let ws = Workspace::new(short("ada"));
    let o = ws.run(&["scenario-dump", "--n", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(ws.out("scenarios.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(
        lines[0],
        "sample,p_load_1,p_load_2,q_load_1,q_load_2,solar_1"
    );
    assert_eq!(lines.len(), 5);
}

#[test]
fn unknown_config_field_is_rejected() {
    let mut cfg = short("ada");
    cfg["alhpa"] = json!(0.1);
    let ws = Workspace::new(cfg);
    let o = ws.run(&["run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("alhpa"), "{}", stderr(&o));
}
