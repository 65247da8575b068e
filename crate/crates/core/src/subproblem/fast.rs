use thiserror::Error;

use super::conic::{ConicProgram, LinExpr, SolveError, SolverOptions, Tag};
use super::{cost_deviation, cost_pv, CouplingDuals, FastDecision, SlowDecision};
use crate::feeder::{FeederModel, SensitivityBundle};
use crate::scenario::Scenario;

/// Quadratic penalty on voltage-box slack, $/h per squared-pu².
pub const SLACK_PENALTY: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{what}: expected length {expected}, got {got}")]
pub struct DimensionError {
    pub what: &'static str,
    pub expected: usize,
    pub got: usize,
}

fn check(what: &'static str, expected: usize, got: usize) -> Result<(), DimensionError> {
    if expected == got {
        Ok(())
    } else {
        Err(DimensionError {
            what,
            expected,
            got,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoltageRegion {
    /// Hard box only.
    Loose,
    /// Hard box plus the tight regulation box.
    Tight,
}

/// Column indices of slow variables when `z` is optimized jointly.
#[derive(Debug, Clone, Copy)]
pub struct SlowLayout {
    pub v0a: usize,
    pub p0a: usize,
    pub p_d: usize,
}

#[derive(Debug, Clone, Copy)]
pub enum SlowInput<'a> {
    /// `z` is data and enters the coupling right-hand sides.
    Fixed(&'a SlowDecision),
    /// `z` is a decision; coupling rows carry its columns and zero right-hand sides.
    Variables(SlowLayout),
}

#[derive(Debug, Clone, Copy)]
pub struct BlockOptions<'a> {
    pub region: VoltageRegion,
    /// Multiplies the slot cost terms in the objective.
    pub cost_weight: f64,
    /// Linear price on voltages, `ν̄ − ν̲` per bus.
    pub voltage_price: Option<&'a [f64]>,
    /// Replace the hard box by a quadratically penalized soft box.
    pub soft_hard_box: bool,
    /// Widen the tight box on both sides by a shared nonnegative excursion
    /// variable; its objective coefficient is left to the caller.
    pub soft_tight_box: bool,
}

impl Default for BlockOptions<'_> {
    fn default() -> Self {
        Self {
            region: VoltageRegion::Loose,
            cost_weight: 1.0,
            voltage_price: None,
            soft_hard_box: false,
            soft_tight_box: false,
        }
    }
}

/// Column and row indices of one fast-timescale block inside a program.
#[derive(Debug, Clone)]
pub struct FastLayout {
    pub n: usize,
    pub n_pv: usize,
    pub p: usize,
    pub q: usize,
    pub v: usize,
    pub p_r: usize,
    pub q_r: usize,
    pub p0: usize,
    pub p0_delta: usize,
    pub t_dev: usize,
    pub t_pv: usize,
    pub slack: Option<(usize, usize)>,
    pub tight_excursion: Option<usize>,
    pub active_rows: usize,
    pub substation_row: usize,
    pub voltage_rows: usize,
}

impl FastLayout {
    pub fn decision(&self, x: &[f64]) -> FastDecision {
        let take = |start: usize, len: usize| x[start..start + len].to_vec();
        FastDecision {
            p: take(self.p, self.n),
            q: take(self.q, self.n),
            v: take(self.v, self.n),
            p_r: take(self.p_r, self.n_pv),
            q_r: take(self.q_r, self.n_pv),
            p0: x[self.p0],
            p0_delta: x[self.p0_delta],
        }
    }

    pub fn duals(&self, eq_duals: &[f64]) -> CouplingDuals {
        CouplingDuals {
            lambda_p: eq_duals[self.active_rows..self.active_rows + self.n].to_vec(),
            lambda_0: eq_duals[self.substation_row],
            lambda_v: eq_duals[self.voltage_rows..self.voltage_rows + self.n].to_vec(),
        }
    }

    pub fn max_slack(&self, x: &[f64]) -> f64 {
        match self.slack {
            Some((lo, hi)) => x[lo..lo + self.n]
                .iter()
                .chain(&x[hi..hi + self.n])
                .fold(0.0, |m, s| m.max(*s)),
            None => 0.0,
        }
    }
}

fn check_scenario(model: &FeederModel, s: &Scenario) -> Result<(), DimensionError> {
    check("scenario.p_load", model.n, s.p_load.len())?;
    check("scenario.q_load", model.n, s.q_load.len())?;
    check("scenario.solar_avail", model.pv_units.len(), s.solar_avail.len())
}

/// Appends the variables and constraints of one slot to `prog`.
pub fn add_fast_block(
    prog: &mut ConicProgram,
    model: &FeederModel,
    sens: &SensitivityBundle,
    scenario: &Scenario,
    slow: SlowInput<'_>,
    opts: &BlockOptions<'_>,
) -> Result<FastLayout, DimensionError> {
    let n = model.n;
    let n_pv = model.pv_units.len();
    check("sensitivity", n, sens.n())?;
    check_scenario(model, scenario)?;
    if let Some(price) = opts.voltage_price {
        check("voltage price", n, price.len())?;
    }
    if let SlowInput::Fixed(z) = slow {
        check("diesel schedule", model.diesel_units.len(), z.p_d.len())?;
    }

    let p = prog.add_vars("p", n);
    let q = prog.add_vars("q", n);
    let v = prog.add_vars("v", n);
    let p_r = prog.add_vars("p_r", n_pv);
    let q_r = prog.add_vars("q_r", n_pv);
    let p0 = prog.add_var("p0");
    let p0_delta = prog.add_var("p0_delta");
    let t_dev = prog.add_var("t_dev");
    let t_pv = prog.add_vars("t_pv", n_pv);

    let mut pv_at = vec![Vec::new(); n];
    for (u, unit) in model.pv_units.iter().enumerate() {
        pv_at[unit.bus - 1].push(u);
    }
    let mut diesel_at = vec![Vec::new(); n];
    for (d, unit) in model.diesel_units.iter().enumerate() {
        diesel_at[unit.bus - 1].push(d);
    }

    // Net active injection: p = p_r − p_l + p_d.
    let active_rows = prog.equalities.len();
    for i in 0..n {
        let mut terms = vec![(p + i, 1.0)];
        terms.extend(pv_at[i].iter().map(|&u| (p_r + u, -1.0)));
        let mut rhs = -scenario.p_load[i];
        match slow {
            SlowInput::Fixed(z) => rhs += diesel_at[i].iter().map(|&d| z.p_d[d]).sum::<f64>(),
            SlowInput::Variables(sl) => {
                terms.extend(diesel_at[i].iter().map(|&d| (sl.p_d + d, -1.0)))
            }
        }
        prog.add_equality(terms, rhs, Tag::ActiveBalance);
    }
    // Net reactive injection: q = q_r − q_l.
    for i in 0..n {
        let mut terms = vec![(q + i, 1.0)];
        terms.extend(pv_at[i].iter().map(|&u| (q_r + u, -1.0)));
        prog.add_equality(terms, -scenario.q_load[i], Tag::ReactiveBalance);
    }
    // Substation: p0 = p0a + δ.
    let substation_row = match slow {
        SlowInput::Fixed(z) => prog.add_equality(
            vec![(p0, 1.0), (p0_delta, -1.0)],
            z.p0a,
            Tag::SubstationBalance,
        ),
        SlowInput::Variables(sl) => prog.add_equality(
            vec![(p0, 1.0), (p0_delta, -1.0), (sl.p0a, -1.0)],
            0.0,
            Tag::SubstationBalance,
        ),
    };
    // Voltage model: v − 2Rp − 2Xq = v0a·1.
    let voltage_rows = prog.equalities.len();
    for i in 0..n {
        let mut terms = vec![(v + i, 1.0)];
        for j in 0..n {
            let (rij, xij) = (sens.r[(i, j)], sens.x[(i, j)]);
            if rij != 0.0 {
                terms.push((p + j, -2.0 * rij));
            }
            if xij != 0.0 {
                terms.push((q + j, -2.0 * xij));
            }
        }
        match slow {
            SlowInput::Fixed(z) => {
                prog.add_equality(terms, z.v0a, Tag::VoltageModel);
            }
            SlowInput::Variables(sl) => {
                terms.push((sl.v0a, -1.0));
                prog.add_equality(terms, 0.0, Tag::VoltageModel);
            }
        }
    }

    // Losses: ‖(√r ∘ Fᵀp, √r ∘ Fᵀq)‖² ≤ p0 + 1ᵀp, written as the
    // second-order cone ‖(u − 1, 2w)‖ ≤ u + 1 with u = p0 + 1ᵀp.
    let flow_expr = |base: usize, line: usize, scale: f64| {
        let mut e = LinExpr::default();
        for bus in 0..n {
            let f = sens.f[(bus, line)];
            if f != 0.0 {
                e.terms.push((base + bus, scale * f));
            }
        }
        e
    };
    let mut u = LinExpr::term(p0, 1.0);
    for i in 0..n {
        u = u.add(p + i, 1.0);
    }
    let mut tail = vec![u.clone().plus(-1.0)];
    for l in 0..n {
        let s = 2.0 * sens.line_r[l].sqrt();
        tail.push(flow_expr(p, l, s));
        tail.push(flow_expr(q, l, s));
    }
    prog.add_cone(u.plus(1.0), tail, Tag::LossBound);

    // Apparent line flow limits.
    for (l, line) in model.lines.iter().enumerate() {
        prog.add_cone(
            LinExpr::constant(line.s_max),
            vec![flow_expr(p, l, 1.0), flow_expr(q, l, 1.0)],
            Tag::LineLimit,
        );
    }

    // Inverter feasible sets.
    for (u, unit) in model.pv_units.iter().enumerate() {
        // A collapsed box has no interior; pin the unit instead.
        if scenario.solar_avail[u] <= 1e-9 {
            prog.add_equality(vec![(p_r + u, 1.0)], 0.0, Tag::InverterLimit);
            prog.add_equality(vec![(q_r + u, 1.0)], 0.0, Tag::InverterLimit);
            continue;
        }
        prog.bound(p_r + u, 0.0, scenario.solar_avail[u], Tag::InverterLimit);
        prog.add_le(
            vec![(q_r + u, 1.0), (p_r + u, -unit.phi)],
            0.0,
            Tag::InverterLimit,
        );
        prog.add_le(
            vec![(q_r + u, -1.0), (p_r + u, -unit.phi)],
            0.0,
            Tag::InverterLimit,
        );
        prog.add_cone(
            LinExpr::constant(unit.inverter_limit),
            vec![LinExpr::term(p_r + u, 1.0), LinExpr::term(q_r + u, 1.0)],
            Tag::InverterLimit,
        );
    }

    let regions = &model.regions;
    let slack = if opts.soft_hard_box {
        let lo = prog.add_vars("slack_lo", n);
        let hi = prog.add_vars("slack_hi", n);
        for i in 0..n {
            prog.add_le(
                vec![(v + i, -1.0), (lo + i, -1.0)],
                -regions.b_lower,
                Tag::HardVoltageBox,
            );
            prog.add_le(
                vec![(v + i, 1.0), (hi + i, -1.0)],
                regions.b_upper,
                Tag::HardVoltageBox,
            );
            // a negative slack only narrows the box, so no sign bound is needed
            prog.quadratic[lo + i] = SLACK_PENALTY;
            prog.quadratic[hi + i] = SLACK_PENALTY;
        }
        Some((lo, hi))
    } else {
        for i in 0..n {
            prog.bound(v + i, regions.b_lower, regions.b_upper, Tag::HardVoltageBox);
        }
        None
    };
    let tight_excursion = if opts.region == VoltageRegion::Tight && opts.soft_tight_box {
        let e = prog.add_var("tight_excursion");
        for i in 0..n {
            prog.add_le(vec![(v + i, -1.0), (e, -1.0)], -regions.a_lower, Tag::TightVoltageBox);
            prog.add_le(vec![(v + i, 1.0), (e, -1.0)], regions.a_upper, Tag::TightVoltageBox);
        }
        prog.bound(e, 0.0, f64::INFINITY, Tag::VoltageSlack);
        Some(e)
    } else {
        if opts.region == VoltageRegion::Tight {
            for i in 0..n {
                prog.bound(v + i, regions.a_lower, regions.a_upper, Tag::TightVoltageBox);
            }
        }
        None
    };

    // Deviation charge epigraph: t ≥ buy·δ, t ≥ sell·δ.
    let prices = &model.prices;
    prog.add_le(
        vec![(p0_delta, prices.buy), (t_dev, -1.0)],
        0.0,
        Tag::DeviationEpigraph,
    );
    prog.add_le(
        vec![(p0_delta, prices.sell), (t_dev, -1.0)],
        0.0,
        Tag::DeviationEpigraph,
    );
    // PV surplus epigraph: t ≥ 0, t ≥ π(p_r − p_l).
    for (u, unit) in model.pv_units.iter().enumerate() {
        prog.add_le(vec![(t_pv + u, -1.0)], 0.0, Tag::PvEpigraph);
        prog.add_le(
            vec![(p_r + u, unit.price), (t_pv + u, -1.0)],
            unit.price * scenario.p_load[unit.bus - 1],
            Tag::PvEpigraph,
        );
    }

    prog.linear[t_dev] += opts.cost_weight;
    for u in 0..n_pv {
        prog.linear[t_pv + u] += opts.cost_weight;
    }
    if let Some(price) = opts.voltage_price {
        for (i, c) in price.iter().enumerate() {
            prog.linear[v + i] += c;
        }
    }

    Ok(FastLayout {
        n,
        n_pv,
        p,
        q,
        v,
        p_r,
        q_r,
        p0,
        p0_delta,
        t_dev,
        t_pv,
        slack,
        tight_excursion,
        active_rows,
        substation_row,
        voltage_rows,
    })
}

/// A single-slot program with `z` fixed.
#[derive(Debug, Clone)]
pub struct FastProgram {
    pub program: ConicProgram,
    pub layout: FastLayout,
    pv_load: Vec<f64>,
    pv_price: Vec<f64>,
    prices: crate::feeder::Prices,
}

#[derive(Debug, Clone)]
pub struct FastSolution {
    pub y: FastDecision,
    pub duals: CouplingDuals,
    /// Optimal value of the program objective (slot cost plus voltage pricing and penalties).
    pub objective: f64,
    /// Slot cost `g(y)`: deviation charge plus PV compensation.
    pub slot_cost: f64,
    /// Largest voltage-box slack used; zero for hard programs.
    pub max_slack: f64,
}

impl FastSolution {
    /// `p0 − (−1ᵀp + pᵀRp + qᵀRq)`; zero when the loss relaxation is tight.
    pub fn loss_gap(&self, sens: &SensitivityBundle) -> f64 {
        let needed = sens
            .substation_injection(&self.y.p, &self.y.q)
            .expect("decision dimensions match the feeder");
        self.y.p0 - needed
    }
}

impl FastProgram {
    fn build(
        model: &FeederModel,
        sens: &SensitivityBundle,
        z: &SlowDecision,
        scenario: &Scenario,
        opts: &BlockOptions<'_>,
    ) -> Result<Self, DimensionError> {
        let mut program = ConicProgram::new();
        let layout = add_fast_block(
            &mut program,
            model,
            sens,
            scenario,
            SlowInput::Fixed(z),
            opts,
        )?;
        Ok(Self {
            program,
            layout,
            pv_load: model
                .pv_units
                .iter()
                .map(|u| scenario.p_load[u.bus - 1])
                .collect(),
            pv_price: model.pv_units.iter().map(|u| u.price).collect(),
            prices: model.prices,
        })
    }

    /// General single-slot program; the named builders below are special cases.
    pub fn new(
        model: &FeederModel,
        sens: &SensitivityBundle,
        z: &SlowDecision,
        scenario: &Scenario,
        opts: &BlockOptions<'_>,
    ) -> Result<Self, DimensionError> {
        Self::build(model, sens, z, scenario, opts)
    }

    pub fn slot_cost(&self, y: &FastDecision) -> f64 {
        cost_deviation(&self.prices, y.p0_delta) + cost_pv(&y.p_r, &self.pv_load, &self.pv_price)
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<FastSolution, SolveError> {
        let sol = self.program.solve(opts)?;
        let y = self.layout.decision(&sol.x);
        Ok(FastSolution {
            slot_cost: self.slot_cost(&y),
            duals: self.layout.duals(&sol.eq_duals),
            objective: sol.objective,
            max_slack: self.layout.max_slack(&sol.x),
            y,
        })
    }
}

/// Lagrangian slot program: slot cost plus `(ν̄ − ν̲)ᵀv`, hard box only.
pub fn build_fast_average(
    model: &FeederModel,
    sens: &SensitivityBundle,
    z: &SlowDecision,
    nu_lower: &[f64],
    nu_upper: &[f64],
    scenario: &Scenario,
) -> Result<FastProgram, DimensionError> {
    check("nu_lower", model.n, nu_lower.len())?;
    check("nu_upper", model.n, nu_upper.len())?;
    let price: Vec<f64> = nu_upper.iter().zip(nu_lower).map(|(u, l)| u - l).collect();
    FastProgram::build(
        model,
        sens,
        z,
        scenario,
        &BlockOptions {
            voltage_price: Some(&price),
            ..Default::default()
        },
    )
}

/// Slot cost minimization with voltages confined to the tight region.
pub fn build_fast_tight(
    model: &FeederModel,
    sens: &SensitivityBundle,
    z: &SlowDecision,
    scenario: &Scenario,
) -> Result<FastProgram, DimensionError> {
    FastProgram::build(
        model,
        sens,
        z,
        scenario,
        &BlockOptions {
            region: VoltageRegion::Tight,
            ..Default::default()
        },
    )
}

/// Relative slack on the smallest excursion when it becomes a bound.
const EXCURSION_SLACK: f64 = 1e-6;

/// Cheapest recourse among those whose largest excursion from the tight box
/// is smallest, with the hard box enforced. Two solves: the first finds the
/// smallest excursion, the second minimizes the slot cost under it.
pub fn solve_closest_tight(
    model: &FeederModel,
    sens: &SensitivityBundle,
    z: &SlowDecision,
    scenario: &Scenario,
    solver: &SolverOptions,
) -> Result<FastSolution, SolveError> {
    let opts = BlockOptions {
        region: VoltageRegion::Tight,
        soft_tight_box: true,
        cost_weight: 0.0,
        ..Default::default()
    };
    let mut prog = FastProgram::build(model, sens, z, scenario, &opts)
        .map_err(|e| SolveError::Numerical(e.to_string()))?;
    let e = prog.layout.tight_excursion.expect("soft tight box adds the excursion");
    prog.program.linear[e] = 1.0;
    let first = prog.program.solve(solver)?;
    let cap = first.x[e] * (1.0 + EXCURSION_SLACK) + EXCURSION_SLACK * 1e-3;

    let mut prog = FastProgram::build(
        model,
        sens,
        z,
        scenario,
        &BlockOptions {
            cost_weight: 1.0,
            ..opts
        },
    )
    .map_err(|e| SolveError::Numerical(e.to_string()))?;
    prog.program.bound(e, 0.0, cap, Tag::TightVoltageBox);
    prog.solve(solver)
}

/// Slot cost minimization with only the hard voltage box.
pub fn build_fast_loose(
    model: &FeederModel,
    sens: &SensitivityBundle,
    z: &SlowDecision,
    scenario: &Scenario,
) -> Result<FastProgram, DimensionError> {
    FastProgram::build(model, sens, z, scenario, &BlockOptions::default())
}
