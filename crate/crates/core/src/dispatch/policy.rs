use serde::{Deserialize, Serialize};

use super::Problem;
use crate::scenario::Scenario;
use crate::subproblem::{
    build_fast_average, build_fast_loose, build_fast_tight, BlockOptions, FastDecision,
    solve_closest_tight, FastProgram, FastSolution, SlowDecision, SolveError,
};

/// Tolerance on squared voltages when testing membership in a region.
pub const REGION_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotChoice {
    Average,
    Loose,
    Tight,
}

/// One fast-timescale decision together with what it took to obtain it.
#[derive(Debug, Clone)]
pub struct SlotOutcome {
    pub solution: FastSolution,
    pub choice: SlotChoice,
    /// Some voltage lies outside the tight region.
    pub violates_tight: bool,
    /// The hard box had to be softened to find any recourse.
    pub used_slack: bool,
    /// The tight program was attempted and found infeasible.
    pub tight_infeasible: bool,
}

impl SlotOutcome {
    fn new(problem: &Problem, solution: FastSolution, choice: SlotChoice, used_slack: bool) -> Self {
        let violates_tight = !problem.in_tight(&solution.y.v);
        Self {
            solution,
            choice,
            violates_tight,
            used_slack,
            tight_infeasible: false,
        }
    }
}

fn soft_fallback(
    problem: &Problem,
    z: &SlowDecision,
    scenario: &Scenario,
    voltage_price: Option<&[f64]>,
) -> Result<FastSolution, SolveError> {
    let prog = FastProgram::new(
        &problem.model,
        &problem.sens,
        z,
        scenario,
        &BlockOptions {
            voltage_price,
            soft_hard_box: true,
            ..Default::default()
        },
    )
    .map_err(|e| SolveError::Numerical(e.to_string()))?;
    prog.solve(&problem.solver)
}

/// Lagrangian slot program at `(z, ν)`; softens the hard box if it admits no recourse.
pub fn solve_average_slot(
    problem: &Problem,
    z: &SlowDecision,
    nu_lower: &[f64],
    nu_upper: &[f64],
    scenario: &Scenario,
) -> Result<SlotOutcome, SolveError> {
    let prog = build_fast_average(&problem.model, &problem.sens, z, nu_lower, nu_upper, scenario)
        .map_err(|e| SolveError::Numerical(e.to_string()))?;
    match prog.solve(&problem.solver) {
        Ok(sol) => Ok(SlotOutcome::new(problem, sol, SlotChoice::Average, false)),
        Err(SolveError::Infeasible) => {
            let price: Vec<f64> = nu_upper.iter().zip(nu_lower).map(|(u, l)| u - l).collect();
            let sol = soft_fallback(problem, z, scenario, Some(&price))?;
            Ok(SlotOutcome::new(problem, sol, SlotChoice::Average, true))
        }
        Err(e) => Err(e),
    }
}

/// Slot cost minimization over the hard box, softened if infeasible.
pub fn solve_loose_slot(
    problem: &Problem,
    z: &SlowDecision,
    scenario: &Scenario,
) -> Result<SlotOutcome, SolveError> {
    let prog = build_fast_loose(&problem.model, &problem.sens, z, scenario)
        .map_err(|e| SolveError::Numerical(e.to_string()))?;
    match prog.solve(&problem.solver) {
        Ok(sol) => Ok(SlotOutcome::new(problem, sol, SlotChoice::Loose, false)),
        Err(SolveError::Infeasible) => {
            let sol = soft_fallback(problem, z, scenario, None)?;
            Ok(SlotOutcome::new(problem, sol, SlotChoice::Loose, true))
        }
        Err(e) => Err(e),
    }
}

fn solve_tight(
    problem: &Problem,
    z: &SlowDecision,
    scenario: &Scenario,
) -> Result<Option<FastSolution>, SolveError> {
    let prog = build_fast_tight(&problem.model, &problem.sens, z, scenario)
        .map_err(|e| SolveError::Numerical(e.to_string()))?;
    match prog.solve(&problem.solver) {
        Ok(sol) => Ok(Some(sol)),
        Err(SolveError::Infeasible) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Chooses between the loose and tight solutions of a slot.
///
/// `g_tight = None` stands for an infeasible tight program. Returns the choice
/// and the violation indicator. Ties go to the tight solution.
pub fn pda_select(
    g_loose: f64,
    loose_in_tight: bool,
    g_tight: Option<f64>,
    nu: f64,
) -> (SlotChoice, bool) {
    if loose_in_tight {
        return (SlotChoice::Loose, false);
    }
    match g_tight {
        Some(g_a) if g_a <= g_loose + nu => (SlotChoice::Tight, false),
        _ => (SlotChoice::Loose, true),
    }
}

/// Minimizes `g + ν·1{v ∉ 𝒱_A}` through the loose/tight program pair.
pub fn solve_probabilistic_slot(
    problem: &Problem,
    z: &SlowDecision,
    nu: f64,
    scenario: &Scenario,
) -> Result<SlotOutcome, SolveError> {
    let loose = solve_loose_slot(problem, z, scenario)?;
    if !loose.violates_tight {
        return Ok(loose);
    }
    let tight = solve_tight(problem, z, scenario)?;
    let (choice, _) = pda_select(
        loose.solution.slot_cost,
        false,
        tight.as_ref().map(|t| t.slot_cost),
        nu,
    );
    let tight_infeasible = tight.is_none();
    match (choice, tight) {
        (SlotChoice::Tight, Some(sol)) => Ok(SlotOutcome {
            violates_tight: !problem.in_tight(&sol.y.v),
            solution: sol,
            choice: SlotChoice::Tight,
            used_slack: false,
            tight_infeasible: false,
        }),
        _ => Ok(SlotOutcome {
            tight_infeasible,
            ..loose
        }),
    }
}

/// Tight region every slot. When no recourse keeps every voltage inside it,
/// the slot takes the cheapest recourse with the smallest excursion from it.
pub fn solve_deterministic_slot(
    problem: &Problem,
    z: &SlowDecision,
    scenario: &Scenario,
) -> Result<SlotOutcome, SolveError> {
    if let Some(sol) = solve_tight(problem, z, scenario)? {
        return Ok(SlotOutcome::new(problem, sol, SlotChoice::Tight, false));
    }
    let sol = solve_closest_tight(&problem.model, &problem.sens, z, scenario, &problem.solver);
    let outcome = match sol {
        Ok(sol) => SlotOutcome::new(problem, sol, SlotChoice::Tight, false),
        Err(SolveError::Infeasible) => solve_loose_slot(problem, z, scenario)?,
        Err(e) => return Err(e),
    };
    Ok(SlotOutcome {
        tight_infeasible: true,
        ..outcome
    })
}

/// A converged real-time policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Average {
        z: SlowDecision,
        nu_lower: Vec<f64>,
        nu_upper: Vec<f64>,
    },
    Probabilistic {
        z: SlowDecision,
        nu: f64,
    },
    Deterministic {
        z: SlowDecision,
    },
}

impl Policy {
    pub fn z(&self) -> &SlowDecision {
        match self {
            Policy::Average { z, .. } | Policy::Probabilistic { z, .. } | Policy::Deterministic { z } => z,
        }
    }

    pub fn apply(&self, problem: &Problem, scenario: &Scenario) -> Result<SlotOutcome, SolveError> {
        match self {
            Policy::Average {
                z,
                nu_lower,
                nu_upper,
            } => solve_average_slot(problem, z, nu_lower, nu_upper, scenario),
            Policy::Probabilistic { z, nu } => solve_probabilistic_slot(problem, z, *nu, scenario),
            Policy::Deterministic { z } => solve_deterministic_slot(problem, z, scenario),
        }
    }
}

pub fn fast_policy_avg(
    problem: &Problem,
    z: &SlowDecision,
    nu_lower: &[f64],
    nu_upper: &[f64],
    scenario: &Scenario,
) -> Result<FastDecision, SolveError> {
    solve_average_slot(problem, z, nu_lower, nu_upper, scenario).map(|o| o.solution.y)
}

pub fn fast_policy_prob(
    problem: &Problem,
    z: &SlowDecision,
    nu: f64,
    scenario: &Scenario,
) -> Result<FastDecision, SolveError> {
    solve_probabilistic_slot(problem, z, nu, scenario).map(|o| o.solution.y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_cases() {
        assert_eq!(pda_select(8.0, false, Some(10.0), 1.0), (SlotChoice::Loose, true));
        assert_eq!(pda_select(8.0, false, Some(8.5), 1.0), (SlotChoice::Tight, false));
        assert_eq!(pda_select(8.0, false, None, 1e9), (SlotChoice::Loose, true));
        assert_eq!(pda_select(8.0, true, Some(100.0), 0.0), (SlotChoice::Loose, false));
    }

    #[test]
    fn select_tie_goes_to_tight() {
        assert_eq!(pda_select(8.0, false, Some(9.0), 1.0), (SlotChoice::Tight, false));
    }
}
