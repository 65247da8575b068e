use nalgebra::{DMatrix, DVector};

use super::{FeederError, FeederModel};

/// Branch-bus incidence split into the substation column and the reduced matrix.
#[derive(Debug, Clone)]
pub struct Incidence {
    pub a0: DVector<f64>,
    pub a: DMatrix<f64>,
}

/// Linearized distribution-flow sensitivities.
///
/// `f` maps injections to line flows (`P = fᵀ p`), while `r` and `x` map
/// injections to squared voltages (`v = 2 r p + 2 x q + v0`).
#[derive(Debug, Clone)]
pub struct SensitivityBundle {
    pub f: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub x: DMatrix<f64>,
    /// Per-line resistances in line order, kept for the loss factorization.
    pub line_r: DVector<f64>,
}

/// Row `i` is the line feeding bus `i + 1`; column `j` of `a` is bus `j + 1`.
pub fn build_incidence(model: &FeederModel) -> Incidence {
    let n = model.n;
    let mut a0 = DVector::zeros(n);
    let mut a = DMatrix::zeros(n, n);
    for (i, line) in model.lines.iter().enumerate() {
        if line.source == 0 {
            a0[i] = 1.0;
        } else {
            a[(i, line.source - 1)] = 1.0;
        }
        a[(i, line.dest - 1)] = -1.0;
    }
    Incidence { a0, a }
}

/// Builds `F = A⁻¹`, `R = F diag(r) Fᵀ`, `X = F diag(x) Fᵀ`.
///
/// `A` is inverted by forward substitution in breadth-first bus order: the
/// row of `F` for a bus equals its parent's row with `-1` added at the
/// column of the line feeding it.
pub fn build_sensitivity(model: &FeederModel) -> Result<SensitivityBundle, FeederError> {
    let n = model.n;
    let order = model.topological_order();
    if order.len() != n {
        return Err(FeederError::Singular(format!(
            "only {} of {} buses reachable",
            order.len(),
            n
        )));
    }
    let mut f = DMatrix::zeros(n, n);
    for &bus in &order {
        let parent = model.parent[bus];
        if parent != 0 {
            let row = f.row(parent - 1).clone_owned();
            f.row_mut(bus - 1).copy_from(&row);
        }
        f[(bus - 1, bus - 1)] = -1.0;
    }

    let inc = build_incidence(model);
    let residual = (&inc.a * &f - DMatrix::<f64>::identity(n, n)).amax();
    if residual > 1e-10 {
        return Err(FeederError::Singular(format!(
            "A·F deviates from identity by {residual:e}"
        )));
    }

    let line_r = DVector::from_iterator(n, model.lines.iter().map(|l| l.r));
    let line_x = DVector::from_iterator(n, model.lines.iter().map(|l| l.x));
    let r = weighted_gram(&f, &line_r);
    let x = weighted_gram(&f, &line_x);
    Ok(SensitivityBundle { f, r, x, line_r })
}

fn weighted_gram(f: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    let mut scaled = f.clone();
    for (mut col, wi) in scaled.column_iter_mut().zip(w.iter()) {
        col *= *wi;
    }
    let g = scaled * f.transpose();
    // symmetrize away rounding so downstream symmetry checks are exact
    (&g + g.transpose()) * 0.5
}

fn check_len(expected: usize, got: usize) -> Result<(), FeederError> {
    if expected == got {
        Ok(())
    } else {
        Err(FeederError::Dimension { expected, got })
    }
}

impl SensitivityBundle {
    pub fn n(&self) -> usize {
        self.f.nrows()
    }

    /// Squared voltages `2Rp + 2Xq + v0·1`.
    pub fn voltages(&self, p: &[f64], q: &[f64], v0: f64) -> Result<Vec<f64>, FeederError> {
        check_len(self.n(), p.len())?;
        check_len(self.n(), q.len())?;
        let p = DVector::from_column_slice(p);
        let q = DVector::from_column_slice(q);
        let v = (&self.r * p + &self.x * q) * 2.0;
        Ok(v.iter().map(|vi| vi + v0).collect())
    }

    /// Active and reactive line flows `(Fᵀp, Fᵀq)`.
    pub fn line_flows(&self, p: &[f64], q: &[f64]) -> Result<(Vec<f64>, Vec<f64>), FeederError> {
        check_len(self.n(), p.len())?;
        check_len(self.n(), q.len())?;
        let ft = self.f.transpose();
        let pf = &ft * DVector::from_column_slice(p);
        let qf = &ft * DVector::from_column_slice(q);
        Ok((pf.as_slice().to_vec(), qf.as_slice().to_vec()))
    }

    /// Quadratic loss approximation `pᵀRp + qᵀRq`, MW.
    pub fn losses_quadratic(&self, p: &[f64], q: &[f64]) -> Result<f64, FeederError> {
        check_len(self.n(), p.len())?;
        check_len(self.n(), q.len())?;
        let p = DVector::from_column_slice(p);
        let q = DVector::from_column_slice(q);
        Ok(p.dot(&(&self.r * &p)) + q.dot(&(&self.r * &q)))
    }

    /// Substation active injection `-1ᵀp + pᵀRp + qᵀRq`.
    pub fn substation_injection(&self, p: &[f64], q: &[f64]) -> Result<f64, FeederError> {
        Ok(-p.iter().sum::<f64>() + self.losses_quadratic(p, q)?)
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{doc, line};
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn model(n_buses: usize, lines: Vec<crate::feeder::LineRecord>) -> FeederModel {
        FeederModel::from_document(doc(n_buses, lines)).unwrap()
    }

    fn two_bus() -> FeederModel {
        model(2, vec![line(0, 1, 0.01, 0.02)])
    }

    #[test]
    fn incidence_two_bus() {
        let inc = build_incidence(&two_bus());
        assert_eq!(inc.a0.as_slice(), &[1.0]);
        assert_eq!(inc.a.as_slice(), &[-1.0]);
    }

    #[test]
    fn incidence_path_and_star() {
        let path = build_incidence(&model(3, vec![line(0, 1, 0.01, 0.01), line(1, 2, 0.01, 0.01)]));
        assert_eq!(path.a, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 1.0, -1.0]));
        assert_eq!(path.a0.as_slice(), &[1.0, 0.0]);
        let star = build_incidence(&model(3, vec![line(0, 1, 0.01, 0.01), line(0, 2, 0.01, 0.01)]));
        assert_eq!(star.a, DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -1.0]));
    }

    #[test]
    fn two_bus_sensitivities() {
        let s = build_sensitivity(&two_bus()).unwrap();
        assert_abs_diff_eq!(s.r[(0, 0)], 0.01, epsilon = 1e-15);
        assert_abs_diff_eq!(s.x[(0, 0)], 0.02, epsilon = 1e-15);
    }

    #[test]
    fn path_common_path_resistance() {
        let s = build_sensitivity(&model(3, vec![line(0, 1, 0.01, 0.1), line(1, 2, 0.02, 0.1)]))
            .unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.01, 0.01, 0.01, 0.03]);
        assert!((s.r - expected).amax() < 1e-12);
    }

    #[test]
    fn two_bus_voltage_arithmetic() {
        let s = build_sensitivity(&two_bus()).unwrap();
        let v = s.voltages(&[1.0], &[0.5], 1.0).unwrap();
        assert_abs_diff_eq!(v[0], 1.04, epsilon = 1e-14);
        assert_eq!(s.voltages(&[0.0], &[0.0], 1.0).unwrap(), vec![1.0]);
    }

    #[test]
    fn two_bus_flow_and_loss() {
        let s = build_sensitivity(&two_bus()).unwrap();
        let (p, _) = s.line_flows(&[-1.0], &[0.0]).unwrap();
        // a 1 MW load draws 1 MW along the source→destination orientation
        assert_abs_diff_eq!(p[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.losses_quadratic(&[1.0], &[0.0]).unwrap(), 0.01, epsilon = 1e-15);
        assert_eq!(s.losses_quadratic(&[0.0], &[0.0]).unwrap(), 0.0);
    }

    #[test]
    fn path_flow_aggregation() {
        let s = build_sensitivity(&model(3, vec![line(0, 1, 0.01, 0.01), line(1, 2, 0.01, 0.01)]))
            .unwrap();
        let (p, _) = s.line_flows(&[-1.0, -1.0], &[0.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p[0].abs(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p[1].abs(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn dimension_mismatch_reported() {
        let s = build_sensitivity(&two_bus()).unwrap();
        assert!(matches!(
            s.voltages(&[1.0, 2.0], &[0.0], 1.0),
            Err(FeederError::Dimension { expected: 1, got: 2 })
        ));
    }

    /// Random tree on `n + 1` buses: bus `k` attaches to a random earlier bus,
    /// then labels are shuffled so numbering is not topological.
    fn random_tree() -> impl Strategy<Value = FeederModel> {
        (2usize..12)
            .prop_flat_map(|n| {
                (
                    Just(n),
                    proptest::collection::vec(0.0f64..1.0, n),
                    proptest::collection::vec((1e-3f64..0.05, 1e-3f64..0.05), n),
                    Just((1..=n).collect::<Vec<_>>()).prop_shuffle(),
                    proptest::bool::weighted(0.5),
                )
            })
            .prop_map(|(n, attach, imp, perm, flip)| {
                let label = |k: usize| if k == 0 { 0 } else { perm[k - 1] };
                let lines = (1..=n)
                    .map(|k| {
                        let parent = (attach[k - 1] * k as f64) as usize;
                        let (a, b) = (label(parent), label(k));
                        let (from, to) = if flip { (b, a) } else { (a, b) };
                        line(from, to, imp[k - 1].0, imp[k - 1].1)
                    })
                    .collect();
                model(n + 1, lines)
            })
    }

    proptest! {
        #[test]
        fn inverse_and_gram_properties(m in random_tree()) {
            let s = build_sensitivity(&m).unwrap();
            let inc = build_incidence(&m);
            let n = m.n;
            prop_assert!((&inc.a * &s.f - DMatrix::<f64>::identity(n, n)).amax() < 1e-10);
            prop_assert!((&s.r - s.r.transpose()).amax() < 1e-12);
            prop_assert!((&s.x - s.x.transpose()).amax() < 1e-12);
            prop_assert!(s.r.clone().symmetric_eigenvalues().min() > 0.0);
            prop_assert!(s.x.clone().symmetric_eigenvalues().min() > 0.0);
            // Ã has zero row sums
            for i in 0..n {
                prop_assert_eq!(inc.a0[i] + inc.a.row(i).sum(), 0.0);
            }
        }

        #[test]
        fn voltages_are_affine(
            m in random_tree(),
            seed in proptest::collection::vec(-1.0f64..1.0, 36),
            v0 in 0.9f64..1.1,
        ) {
            let s = build_sensitivity(&m).unwrap();
            let n = m.n;
            let p1 = &seed[..n];
            let p2 = &seed[12..12 + n];
            let q = &seed[24..24 + n];
            let sum: Vec<f64> = p1.iter().zip(p2).map(|(a, b)| a + b).collect();
            let lhs = s.voltages(&sum, q, v0).unwrap();
            let base = s.voltages(p2, q, v0).unwrap();
            let part = s.voltages(p1, &vec![0.0; n], 0.0).unwrap();
            for i in 0..n {
                prop_assert!((lhs[i] - base[i] - part[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn losses_match_line_sum(
            m in random_tree(),
            seed in proptest::collection::vec(-2.0f64..2.0, 24),
        ) {
            let s = build_sensitivity(&m).unwrap();
            let n = m.n;
            let (p, q) = (&seed[..n], &seed[12..12 + n]);
            let (pf, qf) = s.line_flows(p, q).unwrap();
            let direct: f64 = m.lines.iter().enumerate()
                .map(|(l, line)| line.r * (pf[l] * pf[l] + qf[l] * qf[l]))
                .sum();
            let quad = s.losses_quadratic(p, q).unwrap();
            prop_assert!(quad >= 0.0);
            prop_assert!((quad - direct).abs() < 1e-10);
            let inj = s.substation_injection(p, q).unwrap();
            prop_assert!((inj - (-p.iter().sum::<f64>() + direct)).abs() < 1e-10);
        }
    }
}
