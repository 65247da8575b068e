//! Stochastic primal-dual dispatch.
//!
//! Both algorithms iterate on the slow decision `z` and a dual state, one
//! sampled slot per iteration. The slot program returns coupling duals whose
//! combination with the slow-cost gradient is a stochastic subgradient in
//! `z`; the dual state moves along the constraint residual of the slot.
//! Reported decisions are sliding averages over the last half of the
//! iterates with weights `1/√i`.

mod policy;
mod run;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::feeder::{build_sensitivity, FeederError, FeederModel, SensitivityBundle};
use crate::scenario::Scenario;
use crate::subproblem::{DimensionError, SlowBounds, SlowDecision, SolveError, SolverOptions};

pub use policy::{
    fast_policy_avg, fast_policy_prob, pda_select, solve_average_slot, solve_deterministic_slot,
    solve_loose_slot, solve_probabilistic_slot, Policy, SlotChoice, SlotOutcome, REGION_TOL,
};
pub use run::{
    ada_run, ada_step, baseline_run, expected_dispatch, pda_run, pda_step, AdaState, Algorithm,
    DualState, EventCounters, IterRecord, PdaState, RunOutcome, RunTrace, SlotStatus, StepReport,
};

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error(transparent)]
    Feeder(#[from] FeederError),
    #[error(transparent)]
    Dimension(#[from] DimensionError),
    #[error("{context}: {source}")]
    Solve {
        context: &'static str,
        source: SolveError,
    },
    #[error("{skipped} of {iterations} slot solves failed; aborting")]
    TooManySkips { skipped: u64, iterations: u64 },
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

/// Feeder, sensitivities, slow-decision box, and solver settings shared by every slot.
#[derive(Debug, Clone)]
pub struct Problem {
    pub model: FeederModel,
    pub sens: SensitivityBundle,
    pub bounds: SlowBounds,
    pub solver: SolverOptions,
}

impl Problem {
    pub fn new(
        model: FeederModel,
        p0a_box: (f64, f64),
        solver: SolverOptions,
    ) -> Result<Self, DispatchError> {
        let (lo, hi) = p0a_box;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(DispatchError::Invalid {
                field: "p0a_box",
                reason: format!("need finite lower <= upper, got [{lo}, {hi}]"),
            });
        }
        let sens = build_sensitivity(&model)?;
        let bounds = SlowBounds::new(&model, p0a_box);
        Ok(Self {
            model,
            sens,
            bounds,
            solver,
        })
    }

    /// `[0, 2 Σ mean load]`.
    pub fn default_p0a_box(p_load_mean: &[f64]) -> (f64, f64) {
        (0.0, 2.0 * p_load_mean.iter().sum::<f64>())
    }

    pub fn project(&self, z: &SlowDecision) -> (SlowDecision, usize) {
        let (v, clamped) = self.bounds.project(&z.to_vec());
        (SlowDecision::from_slice(&v), clamped)
    }

    /// Box midpoints, with the block set to mean load net of mean solar.
    pub fn initial_z(&self, mean: &Scenario) -> SlowDecision {
        let mut z = self.bounds.midpoint();
        z[1] = mean.p_load.iter().sum::<f64>() - mean.solar_avail.iter().sum::<f64>();
        SlowDecision::from_slice(&self.bounds.project(&z).0)
    }

    pub fn in_tight(&self, v: &[f64]) -> bool {
        v.iter().all(|&x| self.model.regions.in_tight(x, REGION_TOL))
    }
}

/// Base step sizes; iteration `k` uses `base/√k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepSchedule {
    pub eps0_v0: f64,
    pub eps0_p0: f64,
    pub eps0_pd: f64,
    pub mu0: f64,
}

impl StepSchedule {
    pub fn ada_default() -> Self {
        Self {
            eps0_v0: 4e-5,
            eps0_p0: 0.4,
            eps0_pd: 6e-3,
            mu0: 225.0,
        }
    }

    pub fn pda_default() -> Self {
        Self {
            mu0: 1.0,
            ..Self::ada_default()
        }
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        for (field, v) in [
            ("eps0_v0", self.eps0_v0),
            ("eps0_p0", self.eps0_p0),
            ("eps0_pd", self.eps0_pd),
            ("mu0", self.mu0),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(DispatchError::Invalid {
                    field: "steps",
                    reason: format!("{field} must be positive, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Per-coordinate primal steps at iteration `k` for a slow vector of length `dim`.
    pub fn primal(&self, k: u64, dim: usize) -> Vec<f64> {
        let d = decay(k);
        let mut e = vec![self.eps0_v0 * d, self.eps0_p0 * d];
        e.resize(dim, self.eps0_pd * d);
        e
    }

    pub fn dual(&self, k: u64) -> f64 {
        self.mu0 * decay(k)
    }
}

fn decay(k: u64) -> f64 {
    1.0 / (k.max(1) as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StopCriteria {
    pub max_iters: u64,
    /// Averages are compared against their value this many iterations earlier.
    pub window: u64,
    pub tol: f64,
    /// No convergence is declared before this many iterations.
    pub min_iters: u64,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self {
            max_iters: 20_000,
            window: 500,
            tol: 1e-4,
            min_iters: 1_000,
        }
    }
}

/// `|a − b| / max(|a|, |b|, 1)`.
pub fn relative_change(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// `(Σ_{i=⌈k/2⌉}^{k} x_i/√i) / (Σ_{i=⌈k/2⌉}^{k} 1/√i)` with `history[i-1] = x_i`.
pub fn sliding_average(history: &[Vec<f64>], k: usize) -> Vec<f64> {
    assert!(k >= 1 && k <= history.len(), "k out of range");
    let start = k.div_ceil(2);
    let dim = history[0].len();
    let mut num = vec![CompensatedSum::default(); dim];
    let mut den = CompensatedSum::default();
    for i in start..=k {
        let w = 1.0 / (i as f64).sqrt();
        den.add(w);
        for (acc, x) in num.iter_mut().zip(&history[i - 1]) {
            acc.add(w * x);
        }
    }
    num.iter().map(|s| s.value() / den.value()).collect()
}

/// Incremental form of [`sliding_average`].
#[derive(Debug, Clone)]
pub struct SlidingAverage {
    window: std::collections::VecDeque<Vec<f64>>,
    /// Index `i` of the oldest iterate kept.
    start: usize,
    count: usize,
    num: Vec<CompensatedSum>,
    den: CompensatedSum,
}

impl SlidingAverage {
    pub fn new(dim: usize) -> Self {
        Self {
            window: Default::default(),
            start: 1,
            count: 0,
            num: vec![CompensatedSum::default(); dim],
            den: CompensatedSum::default(),
        }
    }

    /// Appends `x_{count+1}` and returns the updated average.
    pub fn push(&mut self, x: &[f64]) -> Vec<f64> {
        self.count += 1;
        let w = 1.0 / (self.count as f64).sqrt();
        self.den.add(w);
        for (acc, v) in self.num.iter_mut().zip(x) {
            acc.add(w * v);
        }
        self.window.push_back(x.to_vec());
        while self.start < self.count.div_ceil(2) {
            let old = self.window.pop_front().expect("window holds start..=count");
            let w = 1.0 / (self.start as f64).sqrt();
            self.den.add(-w);
            for (acc, v) in self.num.iter_mut().zip(&old) {
                acc.add(-w * v);
            }
            self.start += 1;
        }
        self.value()
    }

    pub fn value(&self) -> Vec<f64> {
        self.num.iter().map(|s| s.value() / self.den.value()).collect()
    }

    pub fn count(&self) -> usize {
        self.count
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn sliding_average_two_points() {
        let h = vec![vec![0.0], vec![1.0]];
        let expected = (1.0 / 2f64.sqrt()) / (1.0 + 1.0 / 2f64.sqrt());
        assert_eq!(sliding_average(&h, 2)[0], expected);
        assert!((expected - 0.41421).abs() < 1e-5);
        assert_eq!(sliding_average(&h, 1)[0], 0.0);
    }

    #[test]
    fn sliding_average_constant() {
        let h = vec![vec![3.5, -1.0]; 37];
        for k in 1..=37 {
            let a = sliding_average(&h, k);
            assert!((a[0] - 3.5).abs() < 1e-14 && (a[1] + 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn step_schedule_decay() {
        let s = StepSchedule::ada_default();
        assert_eq!(s.primal(1, 4), vec![4e-5, 0.4, 6e-3, 6e-3]);
        assert_eq!(s.dual(4), 112.5);
        assert!(StepSchedule { mu0: 0.0, ..s }.validate().is_err());
        assert_eq!(StepSchedule::pda_default().mu0, 1.0);
    }

    #[test]
    fn relative_change_floor() {
        assert_eq!(relative_change(1e-6, 0.0), 1e-6);
        assert_eq!(relative_change(200.0, 100.0), 0.5);
    }

    proptest! {
        #[test]
        fn incremental_matches_direct(xs in proptest::collection::vec(-1e3f64..1e3, 1..400)) {
            let hist: Vec<Vec<f64>> = xs.iter().map(|x| vec![*x]).collect();
            let mut avg = SlidingAverage::new(1);
            for k in 1..=hist.len() {
                let a = avg.push(&hist[k - 1])[0];
                let b = sliding_average(&hist, k)[0];
                prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}
