//! A small conic program container and its interior-point solve.
//!
//! Programs have the form
//!
//! ```text
//! minimize    cᵀx + Σ dᵢ xᵢ² + const
//! subject to  aₖᵀx = bₖ                    (equalities, tagged)
//!             aₖᵀx ≤ bₖ                    (inequalities, tagged)
//!             ‖tailₖ(x)‖₂ ≤ headₖ(x)       (second-order cones, affine entries)
//! ```
//!
//! Equality duals are reported as value sensitivities: raising `bₖ` by `δ`
//! changes the optimal value by `dualₖ·δ + o(δ)`.

use std::fmt::{self, Write as _};

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Role of a constraint row within a dispatch program.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Tag {
    ActiveBalance,
    ReactiveBalance,
    SubstationBalance,
    LossBound,
    LineLimit,
    InverterLimit,
    VoltageModel,
    HardVoltageBox,
    TightVoltageBox,
    DeviationEpigraph,
    PvEpigraph,
    SlowBounds,
    ErgodicMean,
    VoltageSlack,
    OptimalityCap,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinExpr {
    pub terms: Vec<(usize, f64)>,
    pub constant: f64,
}

impl LinExpr {
    pub fn constant(c: f64) -> Self {
        Self {
            terms: Vec::new(),
            constant: c,
        }
    }

    pub fn term(var: usize, coef: f64) -> Self {
        Self {
            terms: vec![(var, coef)],
            constant: 0.0,
        }
    }

    pub fn add(mut self, var: usize, coef: f64) -> Self {
        if coef != 0.0 {
            self.terms.push((var, coef));
        }
        self
    }

    pub fn plus(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum::<f64>() + self.constant
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
    pub tag: Tag,
}

impl Row {
    pub fn lhs(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|&(i, a)| a * x[i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cone {
    pub head: LinExpr,
    pub tail: Vec<LinExpr>,
    pub tag: Tag,
}

impl Cone {
    /// `‖tail‖ − head`; nonpositive when satisfied.
    pub fn violation(&self, x: &[f64]) -> f64 {
        let norm = self
            .tail
            .iter()
            .map(|e| e.eval(x).powi(2))
            .sum::<f64>()
            .sqrt();
        norm - self.head.eval(x)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    names: Vec<String>,
    pub linear: Vec<f64>,
    pub quadratic: Vec<f64>,
    pub objective_constant: f64,
    pub equalities: Vec<Row>,
    pub inequalities: Vec<Row>,
    pub cones: Vec<Cone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub tol_feas: f64,
    pub tol_gap_rel: f64,
    pub tol_gap_abs: f64,
    pub max_iter: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-8,
            tol_gap_rel: 1e-8,
            tol_gap_abs: 1e-8,
            max_iter: 200,
        }
    }
}

/// Largest residual accepted from a reduced-accuracy solve.
const ALMOST_SOLVED_RESIDUAL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SolveError {
    #[error("program is infeasible")]
    Infeasible,
    #[error("solver failed: {0}")]
    Numerical(String),
}

#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub x: Vec<f64>,
    pub eq_duals: Vec<f64>,
    pub objective: f64,
    pub iterations: u32,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_vars(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, var: usize) -> &str {
        &self.names[var]
    }

    /// Adds `count` variables named `prefix[i]` and returns the first index.
    pub fn add_vars(&mut self, prefix: &str, count: usize) -> usize {
        let start = self.names.len();
        for i in 0..count {
            self.names.push(if count == 1 {
                prefix.to_string()
            } else {
                format!("{prefix}[{i}]")
            });
        }
        self.linear.resize(self.names.len(), 0.0);
        self.quadratic.resize(self.names.len(), 0.0);
        start
    }

    pub fn add_var(&mut self, name: &str) -> usize {
        self.add_vars(name, 1)
    }

    pub fn add_equality(&mut self, terms: Vec<(usize, f64)>, rhs: f64, tag: Tag) -> usize {
        self.equalities.push(Row { terms, rhs, tag });
        self.equalities.len() - 1
    }

    pub fn add_le(&mut self, terms: Vec<(usize, f64)>, rhs: f64, tag: Tag) {
        self.inequalities.push(Row { terms, rhs, tag });
    }

    /// Box on one variable; infinite sides are skipped.
    pub fn bound(&mut self, var: usize, lower: f64, upper: f64, tag: Tag) {
        if lower.is_finite() {
            self.add_le(vec![(var, -1.0)], -lower, tag);
        }
        if upper.is_finite() {
            self.add_le(vec![(var, 1.0)], upper, tag);
        }
    }

    pub fn add_cone(&mut self, head: LinExpr, tail: Vec<LinExpr>, tag: Tag) {
        self.cones.push(Cone { head, tail, tag });
    }

    pub fn tags(&self) -> impl Iterator<Item = Tag> + '_ {
        self.equalities
            .iter()
            .map(|r| r.tag)
            .chain(self.inequalities.iter().map(|r| r.tag))
            .chain(self.cones.iter().map(|c| c.tag))
    }

    pub fn objective_value(&self, x: &[f64]) -> f64 {
        self.linear
            .iter()
            .zip(&self.quadratic)
            .zip(x)
            .map(|((c, d), xi)| c * xi + d * xi * xi)
            .sum::<f64>()
            + self.objective_constant
    }

    /// Largest violation over all constraints at `x`.
    pub fn max_violation(&self, x: &[f64]) -> f64 {
        let eq = self
            .equalities
            .iter()
            .map(|r| (r.lhs(x) - r.rhs).abs())
            .fold(0.0, f64::max);
        let le = self
            .inequalities
            .iter()
            .map(|r| r.lhs(x) - r.rhs)
            .fold(0.0, f64::max);
        let cone = self
            .cones
            .iter()
            .map(|c| c.violation(x))
            .fold(0.0, f64::max);
        eq.max(le).max(cone)
    }

    pub fn solve(&self, opts: &SolverOptions) -> Result<ConicSolution, SolveError> {
        let n = self.n_vars();
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut push_row = |terms: &[(usize, f64)], scale: f64, rhs: f64, b: &mut Vec<f64>| {
            let r = b.len();
            for &(j, a) in terms {
                rows.push(r);
                cols.push(j);
                vals.push(a * scale);
            }
            b.push(rhs);
        };

        for r in &self.equalities {
            push_row(&r.terms, 1.0, r.rhs, &mut b);
        }
        if !self.equalities.is_empty() {
            cones.push(SupportedConeT::ZeroConeT(self.equalities.len()));
        }
        for r in &self.inequalities {
            push_row(&r.terms, 1.0, r.rhs, &mut b);
        }
        if !self.inequalities.is_empty() {
            cones.push(SupportedConeT::NonnegativeConeT(self.inequalities.len()));
        }
        // s = b - A x must equal the affine entries, so A = -coeffs, b = constant.
        for c in &self.cones {
            push_row(&c.head.terms, -1.0, c.head.constant, &mut b);
            for e in &c.tail {
                push_row(&e.terms, -1.0, e.constant, &mut b);
            }
            cones.push(SupportedConeT::SecondOrderConeT(1 + c.tail.len()));
        }

        let m = b.len();
        let a = CscMatrix::new_from_triplets(m, n, rows, cols, vals);
        let diag: Vec<usize> = (0..n).filter(|&i| self.quadratic[i] != 0.0).collect();
        let p = CscMatrix::new_from_triplets(
            n,
            n,
            diag.clone(),
            diag.clone(),
            diag.iter().map(|&i| 2.0 * self.quadratic[i]).collect(),
        );

        let (x, z, obj_val, iterations) = run_clarabel(&p, &self.linear, &a, &b, &cones, opts)?;
        let n_eq = self.equalities.len();
        Ok(ConicSolution {
            x,
            eq_duals: z[..n_eq].iter().map(|z| -z).collect(),
            objective: obj_val + self.objective_constant,
            iterations,
        })
    }

    /// Plain-text listing for inspection. Not a stable format.
    pub fn listing(&self) -> String {
        let mut out = String::new();
        let fmt_terms = |terms: &[(usize, f64)]| -> String {
            if terms.is_empty() {
                return "0".into();
            }
            terms
                .iter()
                .map(|&(i, a)| format!("{a:+} {}", self.names[i]))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = writeln!(out, "minimize");
        let obj: Vec<_> = self
            .linear
            .iter()
            .enumerate()
            .filter(|(_, c)| **c != 0.0)
            .map(|(i, c)| (i, *c))
            .collect();
        let _ = write!(out, "  {}", fmt_terms(&obj));
        for (i, d) in self.quadratic.iter().enumerate().filter(|(_, d)| **d != 0.0) {
            let _ = write!(out, " {d:+} {}^2", self.names[i]);
        }
        let _ = writeln!(out, " {:+}", self.objective_constant);
        let _ = writeln!(out, "subject to");
        for r in &self.equalities {
            let _ = writeln!(out, "  [{:?}] {} = {}", r.tag, fmt_terms(&r.terms), r.rhs);
        }
        for r in &self.inequalities {
            let _ = writeln!(out, "  [{:?}] {} <= {}", r.tag, fmt_terms(&r.terms), r.rhs);
        }
        for c in &self.cones {
            let tail: Vec<_> = c
                .tail
                .iter()
                .map(|e| format!("({} {:+})", fmt_terms(&e.terms), e.constant))
                .collect();
            let _ = writeln!(
                out,
                "  [{:?}] || {} || <= {} {:+}",
                c.tag,
                tail.join(", "),
                fmt_terms(&c.head.terms),
                c.head.constant
            );
        }
        out
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// One Clarabel solve; returns primal, conic duals, objective and iterations.
fn run_clarabel(
    p: &CscMatrix<f64>,
    q: &[f64],
    a: &CscMatrix<f64>,
    b: &[f64],
    cones: &[SupportedConeT<f64>],
    opts: &SolverOptions,
) -> Result<(Vec<f64>, Vec<f64>, f64, u32), SolveError> {
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_feas(opts.tol_feas)
        .tol_gap_rel(opts.tol_gap_rel)
        .tol_gap_abs(opts.tol_gap_abs)
        .max_iter(opts.max_iter)
        .presolve_enable(false)
        .max_threads(1)
        .build()
        .map_err(|e| SolveError::Numerical(format!("settings: {e}")))?;
    let mut solver = DefaultSolver::new(p, q, a, b, cones, settings)
        .map_err(|e| SolveError::Numerical(format!("setup: {e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    match sol.status {
        SolverStatus::Solved => {}
        SolverStatus::AlmostSolved => {
            if !(sol.r_prim <= ALMOST_SOLVED_RESIDUAL && sol.r_dual <= ALMOST_SOLVED_RESIDUAL) {
                return Err(SolveError::Numerical(format!(
                    "reduced accuracy (primal residual {:e}, dual residual {:e})",
                    sol.r_prim, sol.r_dual
                )));
            }
        }
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            return Err(SolveError::Infeasible)
        }
        other => return Err(SolveError::Numerical(format!("{other:?}"))),
    }
    Ok((sol.x.clone(), sol.z.clone(), sol.obj_val, sol.iterations))
}
