use super::conic::{ConicProgram, SolveError, SolverOptions, Tag};
use super::fast::{add_fast_block, BlockOptions, DimensionError, FastLayout, SlowInput, SlowLayout};
use super::SlowDecision;
use crate::feeder::{FeederModel, SensitivityBundle};
use crate::scenario::Scenario;

/// Relative cost tolerance defining the optimal face in [`SaaProgram::solve_centered`].
const CENTER_COST_SLACK: f64 = 1e-7;

/// Box on the slow decision, in `SlowDecision::to_vec` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SlowBounds {
    /// Substation and diesel limits from the model plus the block purchase box.
    pub fn new(model: &FeederModel, p0a: (f64, f64)) -> Self {
        let mut lower = vec![model.regions.substation_lower, p0a.0];
        let mut upper = vec![model.regions.substation_upper, p0a.1];
        for d in &model.diesel_units {
            lower.push(d.p_min);
            upper.push(d.p_max);
        }
        Self { lower, upper }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    /// Componentwise clamp; the second value counts clamped coordinates.
    pub fn project(&self, z: &[f64]) -> (Vec<f64>, usize) {
        let mut clamped = 0;
        let out = z
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(&x, (&l, &u))| {
                if x < l {
                    clamped += 1;
                    l
                } else if x > u {
                    clamped += 1;
                    u
                } else {
                    x
                }
            })
            .collect();
        (out, clamped)
    }

    pub fn contains(&self, z: &[f64], tol: f64) -> bool {
        z.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(&x, (&l, &u))| x >= l - tol && x <= u + tol)
    }
}

/// Deterministic equivalent over an empirical distribution: one copy of the
/// fast block per scenario sharing a single slow decision, with the mean
/// voltage confined to the tight region.
#[derive(Debug, Clone)]
pub struct SaaProgram {
    pub program: ConicProgram,
    pub slow: SlowLayout,
    pub n_diesel: usize,
    pub blocks: Vec<FastLayout>,
}

#[derive(Debug, Clone)]
pub struct SaaSolution {
    pub z: SlowDecision,
    /// `f(z) + (1/K) Σ g(y_k)`.
    pub cost: f64,
    /// Empirical mean voltage per bus.
    pub mean_voltage: Vec<f64>,
}

pub fn build_saa(
    model: &FeederModel,
    sens: &SensitivityBundle,
    bounds: &SlowBounds,
    scenarios: &[Scenario],
) -> Result<SaaProgram, DimensionError> {
    if scenarios.is_empty() {
        return Err(DimensionError {
            what: "scenario list",
            expected: 1,
            got: 0,
        });
    }
    if bounds.dim() != model.slow_dim() {
        return Err(DimensionError {
            what: "slow bounds",
            expected: model.slow_dim(),
            got: bounds.dim(),
        });
    }
    let mut program = ConicProgram::new();
    let slow = SlowLayout {
        v0a: program.add_var("v0a"),
        p0a: program.add_var("p0a"),
        p_d: program.add_vars("p_d", model.diesel_units.len()),
    };
    let z_cols: Vec<usize> = [slow.v0a, slow.p0a]
        .into_iter()
        .chain((0..model.diesel_units.len()).map(|d| slow.p_d + d))
        .collect();
    for (j, &col) in z_cols.iter().enumerate() {
        program.bound(col, bounds.lower[j], bounds.upper[j], Tag::SlowBounds);
    }
    program.linear[slow.p0a] = model.prices.block;
    for (d, unit) in model.diesel_units.iter().enumerate() {
        program.linear[slow.p_d + d] = unit.cost_linear;
        program.quadratic[slow.p_d + d] = unit.cost_quadratic;
    }

    let weight = 1.0 / scenarios.len() as f64;
    let opts = BlockOptions {
        cost_weight: weight,
        ..Default::default()
    };
    let blocks = scenarios
        .iter()
        .map(|s| add_fast_block(&mut program, model, sens, s, SlowInput::Variables(slow), &opts))
        .collect::<Result<Vec<_>, _>>()?;

    let regions = &model.regions;
    for i in 0..model.n {
        let terms: Vec<_> = blocks.iter().map(|b| (b.v + i, weight)).collect();
        program.add_le(terms.clone(), regions.a_upper, Tag::ErgodicMean);
        program.add_le(
            terms.iter().map(|&(c, w)| (c, -w)).collect(),
            -regions.a_lower,
            Tag::ErgodicMean,
        );
    }
    Ok(SaaProgram {
        program,
        slow,
        n_diesel: model.diesel_units.len(),
        blocks,
    })
}

impl SaaProgram {
    pub fn solve(&self, opts: &SolverOptions) -> Result<SaaSolution, SolveError> {
        self.solve_program(&self.program, opts)
    }

    fn solve_program(
        &self,
        program: &ConicProgram,
        opts: &SolverOptions,
    ) -> Result<SaaSolution, SolveError> {
        let sol = program.solve(opts)?;
        let x = &sol.x;
        let z = SlowDecision {
            v0a: x[self.slow.v0a],
            p0a: x[self.slow.p0a],
            p_d: x[self.slow.p_d..self.slow.p_d + self.n_diesel].to_vec(),
        };
        let n = self.blocks[0].n;
        let k = self.blocks.len() as f64;
        let mean_voltage = (0..n)
            .map(|i| self.blocks.iter().map(|b| x[b.v + i]).sum::<f64>() / k)
            .collect();
        Ok(SaaSolution {
            z,
            cost: sol.objective,
            mean_voltage,
        })
    }

    /// Optimal solution with the substation voltage moved to the middle of
    /// its optimal interval.
    ///
    /// The voltage setpoint carries no cost, so optima are often degenerate
    /// in `v0a`; the solver would otherwise return an arbitrary point of the
    /// interval. The other slow coordinates stay at the first solve.
    pub fn solve_centered(&self, opts: &SolverOptions) -> Result<SaaSolution, SolveError> {
        let first = self.solve(opts)?;
        let mut base = self.program.clone();
        base.bound(self.slow.p0a, first.z.p0a, first.z.p0a, Tag::SlowBounds);
        for (d, &p) in first.z.p_d.iter().enumerate() {
            base.bound(self.slow.p_d + d, p, p, Tag::SlowBounds);
        }
        // with the quadratic terms frozen the objective is linear
        let frozen: f64 = (0..self.n_diesel)
            .map(|d| self.program.quadratic[self.slow.p_d + d] * first.z.p_d[d].powi(2))
            .sum();
        let cap = first.cost + CENTER_COST_SLACK * first.cost.abs().max(1.0);
        let terms: Vec<_> = base
            .linear
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(j, c)| (j, *c))
            .collect();
        base.add_le(terms, cap - frozen - base.objective_constant, Tag::OptimalityCap);
        base.linear.iter_mut().for_each(|c| *c = 0.0);
        base.quadratic.iter_mut().for_each(|d| *d = 0.0);
        base.objective_constant = 0.0;
        let mut ends = [0.0; 2];
        for (end, sign) in ends.iter_mut().zip([1.0, -1.0]) {
            let mut prog = base.clone();
            prog.linear[self.slow.v0a] = sign;
            *end = prog.solve(opts)?.x[self.slow.v0a];
        }
        let mut z = first.z.clone();
        z.v0a = 0.5 * (ends[0] + ends[1]);
        let mut fixed = self.program.clone();
        fixed.bound(self.slow.v0a, z.v0a, z.v0a, Tag::SlowBounds);
        let sol = self.solve_program(&fixed, opts)?;
        Ok(SaaSolution { z, ..sol })
    }
}
