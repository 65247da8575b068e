use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::policy::{solve_average_slot, solve_probabilistic_slot, SlotChoice, SlotOutcome};
use super::{relative_change, DispatchError, Policy, Problem, SlidingAverage, StepSchedule, StopCriteria};
use crate::scenario::{Scenario, ScenarioSource};
use crate::subproblem::{build_saa, slow_cost_gradient, SlowDecision};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Ada,
    Pda,
    ApproxAvg,
    ApproxProb,
    Deterministic,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Ada,
        Algorithm::Pda,
        Algorithm::ApproxAvg,
        Algorithm::ApproxProb,
        Algorithm::Deterministic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ada => "ada",
            Algorithm::Pda => "pda",
            Algorithm::ApproxAvg => "approx_avg",
            Algorithm::ApproxProb => "approx_prob",
            Algorithm::Deterministic => "deterministic",
        }
    }

    pub fn needs_alpha(self) -> bool {
        matches!(self, Algorithm::Pda | Algorithm::ApproxProb)
    }

    pub fn default_steps(self) -> StepSchedule {
        if self.needs_alpha() {
            StepSchedule::pda_default()
        } else {
            StepSchedule::ada_default()
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotStatus {
    Optimal,
    /// Solved only after softening the hard voltage box.
    Slack,
    /// Solver failure; the update was skipped.
    Skipped,
}

impl SlotStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            SlotStatus::Optimal => "optimal",
            SlotStatus::Slack => "slack",
            SlotStatus::Skipped => "skipped",
        }
    }
}

/// What one iteration did, apart from the state change.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub slot_cost: f64,
    pub status: SlotStatus,
    pub choice: Option<SlotChoice>,
    pub indicator: Option<bool>,
    pub clamped: usize,
    pub tight_infeasible: bool,
}

impl StepReport {
    fn skipped() -> Self {
        Self {
            slot_cost: f64::NAN,
            status: SlotStatus::Skipped,
            choice: None,
            indicator: None,
            clamped: 0,
            tight_infeasible: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounters {
    pub slack_solves: u64,
    pub skipped_solves: u64,
    pub tight_infeasible: u64,
    pub clamp_events: u64,
    pub indicator_ones: u64,
}

impl EventCounters {
    fn absorb(&mut self, r: &StepReport) {
        match r.status {
            SlotStatus::Slack => self.slack_solves += 1,
            SlotStatus::Skipped => self.skipped_solves += 1,
            SlotStatus::Optimal => {}
        }
        self.tight_infeasible += r.tight_infeasible as u64;
        self.clamp_events += r.clamped as u64;
        self.indicator_ones += (r.indicator == Some(true)) as u64;
    }
}

/// Row `k` describes iteration `k`: the slot solved at `z_k`, the new iterate
/// `z_{k+1}`, and sliding averages over iterates `1..=k+1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub k: u64,
    pub z: Vec<f64>,
    pub nu: Vec<f64>,
    pub z_avg: Vec<f64>,
    pub nu_avg: Vec<f64>,
    pub slot_cost: f64,
    pub status: SlotStatus,
    pub choice: Option<SlotChoice>,
    pub indicator: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub initial_z: Vec<f64>,
    pub initial_nu: Vec<f64>,
    pub records: Vec<IterRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DualState {
    Average { nu_lower: Vec<f64>, nu_upper: Vec<f64> },
    Probabilistic { nu: f64 },
    None,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub algorithm: Algorithm,
    pub z: SlowDecision,
    pub dual: DualState,
    pub converged: bool,
    pub iterations: u64,
    pub counters: EventCounters,
    pub trace: RunTrace,
}

impl RunOutcome {
    pub fn policy(&self) -> Policy {
        let z = self.z.clone();
        match &self.dual {
            DualState::Average { nu_lower, nu_upper } => Policy::Average {
                z,
                nu_lower: nu_lower.clone(),
                nu_upper: nu_upper.clone(),
            },
            DualState::Probabilistic { nu } => Policy::Probabilistic { z, nu: *nu },
            DualState::None => Policy::Deterministic { z },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaState {
    pub z: SlowDecision,
    pub nu_lower: Vec<f64>,
    pub nu_upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdaState {
    pub z: SlowDecision,
    pub nu: f64,
}

trait IterState {
    fn z(&self) -> &SlowDecision;
    fn nu_vec(&self) -> Vec<f64>;
}

impl IterState for AdaState {
    fn z(&self) -> &SlowDecision {
        &self.z
    }

    fn nu_vec(&self) -> Vec<f64> {
        self.nu_lower.iter().chain(&self.nu_upper).copied().collect()
    }
}

impl IterState for PdaState {
    fn z(&self) -> &SlowDecision {
        &self.z
    }

    fn nu_vec(&self) -> Vec<f64> {
        vec![self.nu]
    }
}

fn primal_update(
    problem: &Problem,
    steps: &StepSchedule,
    z: &SlowDecision,
    outcome: &SlotOutcome,
    k: u64,
) -> (SlowDecision, usize) {
    let model = &problem.model;
    let grad: Vec<f64> = slow_cost_gradient(model, z)
        .iter()
        .zip(outcome.solution.duals.slow_gradient(model))
        .map(|(a, b)| a + b)
        .collect();
    let eps = steps.primal(k, grad.len());
    let raw: Vec<f64> = z
        .to_vec()
        .iter()
        .zip(grad.iter().zip(&eps))
        .map(|(x, (g, e))| x - e * g)
        .collect();
    problem.project(&SlowDecision::from_slice(&raw))
}

fn status_of(outcome: &SlotOutcome) -> SlotStatus {
    if outcome.used_slack {
        SlotStatus::Slack
    } else {
        SlotStatus::Optimal
    }
}

/// One iteration of the average scheme. With `update_z = false` only the
/// dual state moves. Solver failures leave the state unchanged.
pub fn ada_step(
    problem: &Problem,
    steps: &StepSchedule,
    state: &mut AdaState,
    scenario: &Scenario,
    k: u64,
    update_z: bool,
) -> StepReport {
    let outcome = match solve_average_slot(problem, &state.z, &state.nu_lower, &state.nu_upper, scenario) {
        Ok(o) => o,
        Err(e) => {
            log::debug!("iteration {k}: {e}; skipping update");
            return StepReport::skipped();
        }
    };
    let mu = steps.dual(k);
    let reg = &problem.model.regions;
    let v = &outcome.solution.y.v;
    for i in 0..v.len() {
        state.nu_lower[i] = (state.nu_lower[i] + mu * (reg.a_lower - v[i])).max(0.0);
        state.nu_upper[i] = (state.nu_upper[i] + mu * (v[i] - reg.a_upper)).max(0.0);
    }
    let mut clamped = 0;
    if update_z {
        let (z, c) = primal_update(problem, steps, &state.z, &outcome, k);
        state.z = z;
        clamped = c;
    }
    StepReport {
        slot_cost: outcome.solution.slot_cost,
        status: status_of(&outcome),
        choice: Some(outcome.choice),
        indicator: Some(outcome.violates_tight),
        clamped,
        tight_infeasible: false,
    }
}

/// One iteration of the probabilistic scheme.
pub fn pda_step(
    problem: &Problem,
    steps: &StepSchedule,
    state: &mut PdaState,
    scenario: &Scenario,
    k: u64,
    alpha: f64,
    update_z: bool,
) -> StepReport {
    let outcome = match solve_probabilistic_slot(problem, &state.z, state.nu, scenario) {
        Ok(o) => o,
        Err(e) => {
            log::debug!("iteration {k}: {e}; skipping update");
            return StepReport::skipped();
        }
    };
    let indicator = outcome.violates_tight;
    state.nu = (state.nu + steps.dual(k) * (indicator as u8 as f64 - alpha)).max(0.0);
    let mut clamped = 0;
    if update_z {
        let (z, c) = primal_update(problem, steps, &state.z, &outcome, k);
        state.z = z;
        clamped = c;
    }
    StepReport {
        slot_cost: outcome.solution.slot_cost,
        status: status_of(&outcome),
        choice: Some(outcome.choice),
        indicator: Some(indicator),
        clamped,
        tight_infeasible: outcome.tight_infeasible,
    }
}

/// Maximum tolerated fraction of skipped iterations.
const SKIP_LIMIT: f64 = 0.01;
/// Skip fraction is not judged before this many iterations.
const SKIP_GRACE: u64 = 100;

struct Outcome<S> {
    state: S,
    z_avg: Vec<f64>,
    nu_avg: Vec<f64>,
    converged: bool,
    iterations: u64,
    counters: EventCounters,
    trace: RunTrace,
}

fn drive<S: IterState>(
    source: &dyn ScenarioSource,
    stop: &StopCriteria,
    mut state: S,
    mut step: impl FnMut(&mut S, &Scenario, u64) -> StepReport,
) -> Result<Outcome<S>, DispatchError> {
    let z0 = state.z().to_vec();
    let nu0 = state.nu_vec();
    let mut z_avg = SlidingAverage::new(z0.len());
    let mut nu_avg = SlidingAverage::new(nu0.len());
    z_avg.push(&z0);
    nu_avg.push(&nu0);
    let mut trace = RunTrace {
        initial_z: z0,
        initial_nu: nu0,
        records: Vec::with_capacity(stop.max_iters.min(100_000) as usize),
    };
    let mut counters = EventCounters::default();
    let mut converged = false;
    let mut k = 0;
    while k < stop.max_iters {
        k += 1;
        let scenario = source.draw(k);
        let report = step(&mut state, &scenario, k);
        counters.absorb(&report);
        if report.clamped > 0 && counters.clamp_events == report.clamped as u64 {
            log::info!("iteration {k}: slow decision clamped to its box");
        }
        if k >= SKIP_GRACE && counters.skipped_solves as f64 > SKIP_LIMIT * k as f64 {
            return Err(DispatchError::TooManySkips {
                skipped: counters.skipped_solves,
                iterations: k,
            });
        }
        let z = state.z().to_vec();
        let nu = state.nu_vec();
        let za = z_avg.push(&z);
        let na = nu_avg.push(&nu);
        trace.records.push(IterRecord {
            k,
            z,
            nu,
            z_avg: za,
            nu_avg: na,
            slot_cost: report.slot_cost,
            status: report.status,
            choice: report.choice,
            indicator: report.indicator,
        });
        if k >= stop.min_iters.max(stop.window + 1) {
            let now = &trace.records[(k - 1) as usize];
            let then = &trace.records[(k - 1 - stop.window) as usize];
            let change = now
                .z_avg
                .iter()
                .zip(&then.z_avg)
                .chain(now.nu_avg.iter().zip(&then.nu_avg))
                .map(|(a, b)| relative_change(*a, *b))
                .fold(0.0, f64::max);
            if change < stop.tol {
                converged = true;
                break;
            }
        }
        if k % 1000 == 0 {
            log::debug!("iteration {k}");
        }
    }
    if !converged {
        log::warn!("stopped at max_iters = {} without convergence", stop.max_iters);
    }
    Ok(Outcome {
        state,
        z_avg: z_avg.value(),
        nu_avg: nu_avg.value(),
        converged,
        iterations: k,
        counters,
        trace,
    })
}

fn check_alpha(alpha: f64) -> Result<(), DispatchError> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(DispatchError::Invalid {
            field: "alpha",
            reason: format!("must lie in (0, 1], got {alpha}"),
        })
    }
}

fn run_average(
    problem: &Problem,
    source: &dyn ScenarioSource,
    steps: &StepSchedule,
    stop: &StopCriteria,
    z0: SlowDecision,
    update_z: bool,
    algorithm: Algorithm,
) -> Result<RunOutcome, DispatchError> {
    steps.validate()?;
    let n = problem.model.n;
    let state = AdaState {
        z: z0,
        nu_lower: vec![0.0; n],
        nu_upper: vec![0.0; n],
    };
    let out = drive(source, stop, state, |s, xi, k| {
        ada_step(problem, steps, s, xi, k, update_z)
    })?;
    let z = if update_z {
        SlowDecision::from_slice(&out.z_avg)
    } else {
        out.state.z.clone()
    };
    Ok(RunOutcome {
        algorithm,
        z,
        dual: DualState::Average {
            nu_lower: out.nu_avg[..n].to_vec(),
            nu_upper: out.nu_avg[n..].to_vec(),
        },
        converged: out.converged,
        iterations: out.iterations,
        counters: out.counters,
        trace: out.trace,
    })
}

#[allow(clippy::too_many_arguments)]
fn run_probabilistic(
    problem: &Problem,
    source: &dyn ScenarioSource,
    steps: &StepSchedule,
    stop: &StopCriteria,
    alpha: f64,
    z0: SlowDecision,
    update_z: bool,
    algorithm: Algorithm,
) -> Result<RunOutcome, DispatchError> {
    steps.validate()?;
    check_alpha(alpha)?;
    let state = PdaState { z: z0, nu: 0.0 };
    let out = drive(source, stop, state, |s, xi, k| {
        pda_step(problem, steps, s, xi, k, alpha, update_z)
    })?;
    let z = if update_z {
        SlowDecision::from_slice(&out.z_avg)
    } else {
        out.state.z.clone()
    };
    Ok(RunOutcome {
        algorithm,
        z,
        dual: DualState::Probabilistic { nu: out.nu_avg[0] },
        converged: out.converged,
        iterations: out.iterations,
        counters: out.counters,
        trace: out.trace,
    })
}

/// Average dispatch: mean voltages kept in the tight region.
pub fn ada_run(
    problem: &Problem,
    source: &dyn ScenarioSource,
    steps: &StepSchedule,
    stop: &StopCriteria,
) -> Result<RunOutcome, DispatchError> {
    let z0 = problem.initial_z(&source.mean());
    run_average(problem, source, steps, stop, z0, true, Algorithm::Ada)
}

/// Probabilistic dispatch: tight-region violations at most a fraction `alpha` of slots.
pub fn pda_run(
    problem: &Problem,
    source: &dyn ScenarioSource,
    steps: &StepSchedule,
    stop: &StopCriteria,
    alpha: f64,
) -> Result<RunOutcome, DispatchError> {
    let z0 = problem.initial_z(&source.mean());
    run_probabilistic(problem, source, steps, stop, alpha, z0, true, Algorithm::Pda)
}

/// Slow decision of the single-scenario program at `mean`, tight region
/// enforced, with `v0a` centered in its optimal interval.
pub fn expected_dispatch(problem: &Problem, mean: &Scenario) -> Result<SlowDecision, DispatchError> {
    let saa = build_saa(
        &problem.model,
        &problem.sens,
        &problem.bounds,
        std::slice::from_ref(mean),
    )?;
    let sol = saa
        .solve_centered(&problem.solver)
        .map_err(|source| DispatchError::Solve {
            context: "expected-scenario dispatch",
            source,
        })?;
    // solver tolerance can leave z a hair outside its box
    Ok(problem.project(&sol.z).0)
}

/// Baselines built on the expected-scenario slow decision.
///
/// The approximate kinds keep that `z` fixed and iterate only the dual
/// state; the deterministic kind needs no iteration at all.
pub fn baseline_run(
    problem: &Problem,
    source: &dyn ScenarioSource,
    kind: Algorithm,
    steps: &StepSchedule,
    stop: &StopCriteria,
    alpha: Option<f64>,
) -> Result<RunOutcome, DispatchError> {
    let z = expected_dispatch(problem, &source.mean())?;
    match kind {
        Algorithm::ApproxAvg => run_average(problem, source, steps, stop, z, false, kind),
        Algorithm::ApproxProb => {
            let alpha = alpha.ok_or(DispatchError::Invalid {
                field: "alpha",
                reason: "alpha required".into(),
            })?;
            run_probabilistic(problem, source, steps, stop, alpha, z, false, kind)
        }
        Algorithm::Deterministic => Ok(RunOutcome {
            algorithm: kind,
            trace: RunTrace {
                initial_z: z.to_vec(),
                initial_nu: vec![],
                records: vec![],
            },
            z,
            dual: DualState::None,
            converged: true,
            iterations: 0,
            counters: EventCounters::default(),
        }),
        Algorithm::Ada | Algorithm::Pda => Err(DispatchError::Invalid {
            field: "algorithm",
            reason: format!("{kind} is not a baseline"),
        }),
    }
}
