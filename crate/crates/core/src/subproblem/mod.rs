//! Fast-timescale dispatch programs and their solution.

pub mod conic;
mod fast;
mod saa;

use serde::{Deserialize, Serialize};

use crate::feeder::{FeederModel, Prices};

pub use conic::{ConicProgram, ConicSolution, SolveError, SolverOptions, Tag};
pub use fast::{
    add_fast_block, build_fast_average, build_fast_loose, build_fast_tight, solve_closest_tight, BlockOptions,
    DimensionError, FastLayout, FastProgram, FastSolution, SlowInput, SlowLayout, VoltageRegion,
    SLACK_PENALTY,
};
pub use saa::{build_saa, SaaProgram, SaaSolution, SlowBounds};

/// Slow-timescale decision: substation voltage (squared pu), block purchase (MW)
/// and diesel schedule (MW per unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlowDecision {
    pub v0a: f64,
    pub p0a: f64,
    pub p_d: Vec<f64>,
}

impl SlowDecision {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(2 + self.p_d.len());
        out.push(self.v0a);
        out.push(self.p0a);
        out.extend_from_slice(&self.p_d);
        out
    }

    pub fn from_slice(values: &[f64]) -> Self {
        Self {
            v0a: values[0],
            p0a: values[1],
            p_d: values[2..].to_vec(),
        }
    }
}

/// Fast-timescale decision for one slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FastDecision {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub p_r: Vec<f64>,
    pub q_r: Vec<f64>,
    pub p0: f64,
    pub p0_delta: f64,
}

/// Value sensitivities of the coupling equalities (active balance per bus,
/// substation balance, voltage model per bus).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingDuals {
    pub lambda_p: Vec<f64>,
    pub lambda_0: f64,
    pub lambda_v: Vec<f64>,
}

impl CouplingDuals {
    /// Gradient of the slot's optimal value with respect to `z`, in
    /// `SlowDecision::to_vec` order.
    pub fn slow_gradient(&self, model: &FeederModel) -> Vec<f64> {
        let mut g = Vec::with_capacity(model.slow_dim());
        g.push(self.lambda_v.iter().sum());
        g.push(self.lambda_0);
        g.extend(model.diesel_units.iter().map(|d| self.lambda_p[d.bus - 1]));
        g
    }
}

/// Real-time deviation charge `max(buy·δ, sell·δ)`, $/h.
pub fn cost_deviation(prices: &Prices, p0_delta: f64) -> f64 {
    (prices.buy * p0_delta).max(prices.sell * p0_delta)
}

/// Diesel cost `Σ a·p + b·p²`, $/h.
pub fn cost_diesel(model: &FeederModel, p_d: &[f64]) -> f64 {
    model
        .diesel_units
        .iter()
        .zip(p_d)
        .map(|(d, p)| d.cost_linear * p + d.cost_quadratic * p * p)
        .sum()
}

/// PV surplus compensation `πᵀ[p_r − p_l]₊`, $/h.
pub fn cost_pv(p_r: &[f64], p_l_at_pv: &[f64], price: &[f64]) -> f64 {
    p_r.iter()
        .zip(p_l_at_pv)
        .zip(price)
        .map(|((r, l), pi)| pi * (r - l).max(0.0))
        .sum()
}

/// Slow-timescale cost `f(z) = C_D(p_d) + β·p0a`.
pub fn slow_cost(model: &FeederModel, z: &SlowDecision) -> f64 {
    cost_diesel(model, &z.p_d) + model.prices.block * z.p0a
}

/// Subgradient of `f` in `SlowDecision::to_vec` order.
pub fn slow_cost_gradient(model: &FeederModel, z: &SlowDecision) -> Vec<f64> {
    let mut g = vec![0.0, model.prices.block];
    g.extend(
        model
            .diesel_units
            .iter()
            .zip(&z.p_d)
            .map(|(d, p)| d.cost_linear + 2.0 * d.cost_quadratic * p),
    );
    g
}
