//! Monte-Carlo evaluation of converged policies and the sample-average oracle.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dispatch::{CompensatedSum, DispatchError, Policy, Problem, SlotChoice};
use crate::feeder::magnitude_pu;
use crate::scenario::{Scenario, ScenarioSource};
use crate::subproblem::{build_saa, slow_cost, SaaSolution};

pub const HISTOGRAM_BINS: usize = 60;
/// Histogram range extends this far (magnitude pu) beyond the hard box.
pub const HISTOGRAM_MARGIN: f64 = 0.01;
/// Maximum tolerated fraction of failed sample solves.
const FAIL_LIMIT: f64 = 0.01;

/// Binned voltage magnitudes at one bus; out-of-range values land in the end bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageHistogram {
    pub bus: usize,
    pub lower_pu: f64,
    pub upper_pu: f64,
    pub counts: Vec<u64>,
}

impl VoltageHistogram {
    fn new(bus: usize, lower_pu: f64, upper_pu: f64) -> Self {
        Self {
            bus,
            lower_pu,
            upper_pu,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }

    pub fn bin_width(&self) -> f64 {
        (self.upper_pu - self.lower_pu) / HISTOGRAM_BINS as f64
    }

    fn add(&mut self, magnitude: f64) {
        let raw = ((magnitude - self.lower_pu) / self.bin_width()).floor();
        let bin = raw.clamp(0.0, (HISTOGRAM_BINS - 1) as f64) as usize;
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalCounters {
    pub slack_solves: u64,
    pub tight_infeasible: u64,
    pub tight_chosen: u64,
    pub failed_solves: u64,
}

/// Result of one evaluated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    /// `f(z) + g(y)`; NaN if the solve failed.
    pub total_cost: f64,
    pub v: Vec<f64>,
    pub violates_tight: bool,
    pub hard_violation: f64,
    pub inverter_violation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: u64,
    pub seed: u64,
    /// `f(z)`, $/h.
    pub slow_cost: f64,
    /// `f(z) + E g(y)`, $/h.
    pub expected_cost: f64,
    pub cost_std_error: f64,
    pub mean_voltage: Vec<f64>,
    pub violation_prob_overall: f64,
    pub violation_prob_per_bus: Vec<f64>,
    pub under_voltage_prob_per_bus: Vec<f64>,
    pub over_voltage_prob_per_bus: Vec<f64>,
    /// Largest excursion of any voltage outside the hard box, squared pu.
    pub max_hard_violation: f64,
    /// Largest violation of any inverter limit.
    pub max_inverter_violation: f64,
    pub histograms: Vec<VoltageHistogram>,
    pub counters: EvalCounters,
    /// Per-sample total costs in sample order; failed samples are NaN.
    #[serde(skip)]
    pub sample_costs: Vec<f64>,
}

impl EvalReport {
    /// Mean and standard error of `other − self` over common samples.
    pub fn paired_difference(&self, other: &EvalReport) -> (f64, f64) {
        let diffs: Vec<f64> = self
            .sample_costs
            .iter()
            .zip(&other.sample_costs)
            .filter(|(a, b)| a.is_finite() && b.is_finite())
            .map(|(a, b)| b - a)
            .collect();
        mean_and_se(&diffs)
    }
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mut s = CompensatedSum::default();
    for x in xs {
        s.add(*x);
    }
    let mean = s.value() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let mut ss = CompensatedSum::default();
    for x in xs {
        ss.add((x - mean).powi(2));
    }
    (mean, (ss.value() / (n - 1.0) / n).sqrt())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub n_samples: u64,
    /// Recorded in the report; the source decides the actual draws.
    pub seed: u64,
    /// Buses (1-based) with voltage histograms.
    pub histogram_buses: Vec<usize>,
}

fn inverter_violation(problem: &Problem, scenario: &Scenario, p_r: &[f64], q_r: &[f64]) -> f64 {
    problem
        .model
        .pv_units
        .iter()
        .enumerate()
        .map(|(u, unit)| {
            let (p, q) = (p_r[u], q_r[u]);
            let apparent = (p * p + q * q).sqrt() - unit.inverter_limit;
            [
                -p,
                p - scenario.solar_avail[u],
                q.abs() - unit.phi * p,
                apparent,
            ]
            .into_iter()
            .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn evaluate_one(
    problem: &Problem,
    policy: &Policy,
    slow: f64,
    scenario: &Scenario,
) -> Option<(SampleOutcome, bool, bool, bool)> {
    let out = match policy.apply(problem, scenario) {
        Ok(o) => o,
        Err(e) => {
            log::debug!("evaluation solve failed: {e}");
            return None;
        }
    };
    let y = &out.solution.y;
    let reg = &problem.model.regions;
    let hard = y
        .v
        .iter()
        .map(|&v| (reg.b_lower - v).max(v - reg.b_upper).max(0.0))
        .fold(0.0, f64::max);
    Some((
        SampleOutcome {
            total_cost: slow + out.solution.slot_cost,
            violates_tight: out.violates_tight,
            hard_violation: hard,
            inverter_violation: inverter_violation(problem, scenario, &y.p_r, &y.q_r),
            v: y.v.clone(),
        },
        out.used_slack,
        out.tight_infeasible,
        out.choice == SlotChoice::Tight,
    ))
}

/// Applies `policy` to draws `0..n_samples` of `source`.
///
/// Samples are solved in parallel; aggregation runs in sample order so the
/// report does not depend on the thread count.
pub fn monte_carlo_eval(
    problem: &Problem,
    source: &dyn ScenarioSource,
    policy: &Policy,
    opts: &EvalOptions,
) -> Result<EvalReport, DispatchError> {
    if opts.n_samples == 0 {
        return Err(DispatchError::Invalid {
            field: "n_samples",
            reason: "must be at least 1".into(),
        });
    }
    let n_bus = problem.model.n;
    for &b in &opts.histogram_buses {
        if b == 0 || b > n_bus {
            return Err(DispatchError::Invalid {
                field: "histogram_buses",
                reason: format!("bus {b} outside 1..={n_bus}"),
            });
        }
    }
    let slow = slow_cost(&problem.model, policy.z());
    let results: Vec<_> = (0..opts.n_samples)
        .into_par_iter()
        .map(|k| evaluate_one(problem, policy, slow, &source.draw(k)))
        .collect();

    let reg = problem.model.regions;
    let lo = magnitude_pu(reg.b_lower) - HISTOGRAM_MARGIN;
    let hi = magnitude_pu(reg.b_upper) + HISTOGRAM_MARGIN;
    let mut histograms: Vec<_> = opts
        .histogram_buses
        .iter()
        .map(|&b| VoltageHistogram::new(b, lo, hi))
        .collect();
    let mut counters = EvalCounters::default();
    let mut v_sum = vec![CompensatedSum::default(); n_bus];
    let mut per_bus = vec![0u64; n_bus];
    let mut under = vec![0u64; n_bus];
    let mut over = vec![0u64; n_bus];
    let mut overall = 0u64;
    let mut max_hard: f64 = 0.0;
    let mut max_inv: f64 = 0.0;
    let mut costs = Vec::with_capacity(results.len());
    let mut sample_costs = Vec::with_capacity(results.len());
    for r in &results {
        let Some((s, slack, tight_inf, tight)) = r else {
            counters.failed_solves += 1;
            sample_costs.push(f64::NAN);
            continue;
        };
        counters.slack_solves += *slack as u64;
        counters.tight_infeasible += *tight_inf as u64;
        counters.tight_chosen += *tight as u64;
        costs.push(s.total_cost);
        sample_costs.push(s.total_cost);
        overall += s.violates_tight as u64;
        max_hard = max_hard.max(s.hard_violation);
        max_inv = max_inv.max(s.inverter_violation);
        for (i, &v) in s.v.iter().enumerate() {
            v_sum[i].add(v);
            let below = v < reg.a_lower - crate::dispatch::REGION_TOL;
            let above = v > reg.a_upper + crate::dispatch::REGION_TOL;
            under[i] += below as u64;
            over[i] += above as u64;
            per_bus[i] += (below || above) as u64;
        }
        for h in &mut histograms {
            h.add(magnitude_pu(s.v[h.bus - 1]));
        }
    }
    if counters.failed_solves as f64 > FAIL_LIMIT * opts.n_samples as f64 {
        return Err(DispatchError::TooManySkips {
            skipped: counters.failed_solves,
            iterations: opts.n_samples,
        });
    }
    let ok = costs.len() as f64;
    let frac = |c: &[u64]| c.iter().map(|&x| x as f64 / ok).collect::<Vec<_>>();
    let (expected_cost, cost_std_error) = mean_and_se(&costs);
    Ok(EvalReport {
        n_samples: opts.n_samples,
        seed: opts.seed,
        slow_cost: slow,
        expected_cost,
        cost_std_error,
        mean_voltage: v_sum.iter().map(|s| s.value() / ok).collect(),
        violation_prob_overall: overall as f64 / ok,
        violation_prob_per_bus: frac(&per_bus),
        under_voltage_prob_per_bus: frac(&under),
        over_voltage_prob_per_bus: frac(&over),
        max_hard_violation: max_hard,
        max_inverter_violation: max_inv,
        histograms,
        counters,
        sample_costs,
    })
}

/// Deterministic-equivalent program over a fixed scenario list.
pub fn saa_oracle(problem: &Problem, scenarios: &[Scenario]) -> Result<SaaSolution, DispatchError> {
    let saa = build_saa(&problem.model, &problem.sens, &problem.bounds, scenarios)?;
    saa.solve(&problem.solver)
        .map_err(|source| DispatchError::Solve {
            context: "sample-average program",
            source,
        })
}
