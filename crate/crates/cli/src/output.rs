use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use feeder_dispatch::dispatch::{Algorithm, EventCounters, IterRecord, Policy, RunOutcome, RunTrace};
use feeder_dispatch::evaluate::{EvalReport, VoltageHistogram};
use feeder_dispatch::feeder::{magnitude_pu, FeederModel};
use feeder_dispatch::subproblem::{slow_cost, SlowDecision};
use serde::{Deserialize, Serialize};

/// Version of `summary.json`, `eval.json` and `oracle.json`.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub feeder_name: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub alpha: Option<f64>,
    pub converged: bool,
    /// The run hit `max_iters` before the stopping test passed.
    pub max_iters_warning: bool,
    pub iterations: u64,
    /// `f(z)` at the reported slow decision, $/h.
    pub slow_cost: f64,
    pub policy: Policy,
    pub counters: EventCounters,
}

impl Summary {
    pub fn new(model: &FeederModel, out: &RunOutcome, seed: u64, alpha: Option<f64>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            feeder_name: model.name.clone(),
            algorithm: out.algorithm,
            seed,
            alpha: alpha.filter(|_| out.algorithm.needs_alpha()),
            converged: out.converged,
            max_iters_warning: !out.converged,
            iterations: out.iterations,
            slow_cost: slow_cost(model, &out.z),
            policy: out.policy(),
            counters: out.counters.clone(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading summary {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing summary {}", path.display()))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => bail!(
                "summary {} has schema_version {v}, expected {SCHEMA_VERSION}",
                path.display()
            ),
            None => bail!("summary {} has no schema_version", path.display()),
        }
        serde_json::from_value(value).with_context(|| format!("parsing summary {}", path.display()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalFile<'a> {
    pub schema_version: u32,
    pub feeder_name: &'a str,
    pub algorithm: Algorithm,
    #[serde(flatten)]
    pub report: &'a EvalReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleFile {
    pub schema_version: u32,
    pub feeder_name: String,
    pub k: usize,
    pub seed: u64,
    pub z: SlowDecision,
    /// `f(z) + (1/K) Σ g(y_k)`, $/h.
    pub cost: f64,
    pub slow_cost: f64,
    pub mean_voltage: Vec<f64>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    use std::io::Write as _;
    writeln!(w)?;
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn num(x: f64) -> String {
    format!("{x}")
}

fn nu_names(trace: &RunTrace, n_bus: usize) -> Vec<String> {
    match trace.initial_nu.len() {
        0 => vec![],
        1 => vec!["nu".into()],
        _ => (1..=n_bus)
            .map(|i| format!("nu_lower_{i}"))
            .chain((1..=n_bus).map(|i| format!("nu_upper_{i}")))
            .collect(),
    }
}

fn z_names(n_diesel: usize) -> Vec<String> {
    ["v0a".to_string(), "p0a".to_string()]
        .into_iter()
        .chain((1..=n_diesel).map(|d| format!("p_d_{d}")))
        .collect()
}

/// One row per iteration plus row `k = 0` holding the initial iterate.
pub fn write_trace(path: &Path, model: &FeederModel, trace: &RunTrace) -> Result<()> {
    let mut w = csv_writer(path)?;
    let zn = z_names(model.diesel_units.len());
    let nn = nu_names(trace, model.n);
    let mut header = vec!["k".to_string(), "status".into(), "choice".into(), "indicator".into(), "slot_cost".into()];
    header.extend(zn.iter().cloned());
    header.extend(nn.iter().cloned());
    header.extend(zn.iter().map(|s| format!("avg_{s}")));
    header.extend(nn.iter().map(|s| format!("avg_{s}")));
    w.write_record(&header)?;

    let mut row0 = vec!["0".to_string(), String::new(), String::new(), String::new(), String::new()];
    for block in [&trace.initial_z, &trace.initial_nu, &trace.initial_z, &trace.initial_nu] {
        row0.extend(block.iter().map(|&x| num(x)));
    }
    w.write_record(&row0)?;
    for r in &trace.records {
        w.write_record(trace_row(r))?;
    }
    w.flush()?;
    Ok(())
}

fn trace_row(r: &IterRecord) -> Vec<String> {
    let mut row = vec![
        r.k.to_string(),
        r.status.as_str().to_string(),
        r.choice
            .map(|c| serde_json::to_value(c).unwrap().as_str().unwrap().to_string())
            .unwrap_or_default(),
        r.indicator.map(|b| (b as u8).to_string()).unwrap_or_default(),
        num(r.slot_cost),
    ];
    for block in [&r.z, &r.nu, &r.z_avg, &r.nu_avg] {
        row.extend(block.iter().map(|&x| num(x)));
    }
    row
}

pub fn write_histogram(path: &Path, h: &VoltageHistogram) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["bin", "lower_pu", "upper_pu", "count"])?;
    let width = h.bin_width();
    for (i, c) in h.counts.iter().enumerate() {
        let lo = h.lower_pu + width * i as f64;
        w.write_record([i.to_string(), num(lo), num(lo + width), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_per_bus(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "bus",
        "mean_voltage_sq",
        "mean_voltage_pu",
        "violation_prob",
        "under_prob",
        "over_prob",
    ])?;
    for i in 0..report.mean_voltage.len() {
        w.write_record([
            (i + 1).to_string(),
            num(report.mean_voltage[i]),
            num(magnitude_pu(report.mean_voltage[i])),
            num(report.violation_prob_per_bus[i]),
            num(report.under_voltage_prob_per_bus[i]),
            num(report.over_voltage_prob_per_bus[i]),
        ])?;
    }
    w.flush()?;
    Ok(())
}
