//! Projection of the sample moment vector onto `{kappa : A kappa <= rho}`
//! in the metric of the inverse moment covariance.
//!
//! The problem
//!
//! ```text
//!     minimize    n (pbar - kappa)' Sigma^{-1} (pbar - kappa)
//!     subject to  A kappa <= rho
//! ```
//!
//! is whitened with the Cholesky factor `Sigma = L L'` (`y = L^{-1} kappa`)
//! into a Euclidean projection, which is then solved with the dual
//! active-set method of Goldfarb and Idnani. The method starts from the
//! unconstrained minimum and adds violated constraints one at a time, so
//! the final working set is an exact description of the binding face.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::stats::SpdMatrix;

/// Relative tolerance used to report a row as active.
pub const ACTIVE_TOL: f64 = 1e-7;
/// Absolute primal feasibility tolerance.
pub const FEAS_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct QpProblem {
    pub pbar: DVector<f64>,
    pub sigma: SpdMatrix,
    pub a: DMatrix<f64>,
    pub rho: DVector<f64>,
    pub n: usize,
}

impl QpProblem {
    pub fn new(
        pbar: DVector<f64>,
        sigma: SpdMatrix,
        a: DMatrix<f64>,
        rho: DVector<f64>,
        n: usize,
    ) -> Result<Self> {
        let dim = pbar.len();
        if sigma.dim() != dim {
            return Err(Error::shape("QpProblem sigma", dim, sigma.dim()));
        }
        if a.ncols() != dim {
            return Err(Error::shape("QpProblem A columns", dim, a.ncols()));
        }
        if rho.len() != a.nrows() {
            return Err(Error::shape("QpProblem rho", a.nrows(), rho.len()));
        }
        if n == 0 {
            return Err(Error::shape("QpProblem n", ">= 1", 0));
        }
        Ok(Self {
            pbar,
            sigma,
            a,
            rho,
            n,
        })
    }

    pub fn dim(&self) -> usize {
        self.pbar.len()
    }

    pub fn rows(&self) -> usize {
        self.a.nrows()
    }

    /// Active rows at `kappa` under the reporting tolerance.
    pub fn active_rows_at(&self, kappa: &DVector<f64>) -> Vec<usize> {
        let ak = &self.a * kappa;
        (0..self.rows())
            .filter(|&l| (ak[l] - self.rho[l]).abs() <= ACTIVE_TOL * (1.0 + self.rho[l].abs()))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct QpSolution {
    pub kappa_hat: DVector<f64>,
    /// The statistic `n (pbar - kappa)' Sigma^{-1} (pbar - kappa)` at the minimizer.
    pub statistic: f64,
    /// Lagrange multipliers of `A kappa <= rho` for the objective as written
    /// (including the factor `n`).
    pub multipliers: DVector<f64>,
    pub active_rows: Vec<usize>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct KktReport {
    /// `‖Sigma^{-1}(pbar - kappa) - A' lambda / (2n)‖_inf`
    pub stationarity: f64,
    pub primal_infeasibility: f64,
    pub dual_infeasibility: f64,
    /// `max_l |lambda_l (a_l' kappa - rho_l)|`
    pub complementarity: f64,
}

impl QpSolution {
    pub fn kkt_report(&self, problem: &QpProblem) -> KktReport {
        let two_n = 2.0 * problem.n as f64;
        let grad = problem.sigma.solve(&(&problem.pbar - &self.kappa_hat));
        let at_u = problem.a.transpose() * (&self.multipliers / two_n);
        let slack = &problem.a * &self.kappa_hat - &problem.rho;
        KktReport {
            stationarity: (grad - at_u).amax(),
            primal_infeasibility: slack.iter().cloned().fold(0.0, f64::max),
            dual_infeasibility: self.multipliers.iter().fold(0.0, |m, &l| m.max(-l)),
            complementarity: slack
                .iter()
                .zip(self.multipliers.iter())
                .fold(0.0, |m, (s, l)| m.max((s * l).abs())),
        }
    }

    /// Value of the Lagrangian dual at the returned multipliers.
    pub fn dual_objective(&self, problem: &QpProblem) -> f64 {
        let lambda = &self.multipliers;
        let gap = &problem.a * &problem.pbar - &problem.rho;
        let at_l = problem.a.transpose() * lambda;
        lambda.dot(&gap) - problem.sigma.quad(&at_l) / (4.0 * problem.n as f64)
    }
}

struct Step {
    z: DVector<f64>,
    r: DVector<f64>,
}

/// Primal direction `z` (component of `normal` orthogonal to the working
/// set) and dual direction `r = R^{-1} Q_1' normal`.
fn step_directions(working: &[DVector<f64>], normal: &DVector<f64>) -> Step {
    if working.is_empty() {
        return Step {
            z: normal.clone(),
            r: DVector::zeros(0),
        };
    }
    let dim = normal.len();
    let q = working.len();
    let mut n_mat = DMatrix::<f64>::zeros(dim, q);
    for (j, col) in working.iter().enumerate() {
        n_mat.set_column(j, col);
    }
    let qr = n_mat.qr();
    let q1 = qr.q();
    let r_mat = qr.r();
    let d1 = q1.transpose() * normal;
    let z = normal - &q1 * &d1;
    let r = r_mat
        .solve_upper_triangular(&d1)
        .unwrap_or_else(|| DVector::from_element(q, f64::NAN));
    Step { z, r }
}

pub fn solve_projection(problem: &QpProblem) -> Result<QpSolution> {
    let rows = problem.rows();
    let n = problem.n as f64;

    let ap = &problem.a * &problem.pbar;
    if (0..rows).all(|l| ap[l] <= problem.rho[l]) {
        return Ok(QpSolution {
            kappa_hat: problem.pbar.clone(),
            statistic: 0.0,
            multipliers: DVector::zeros(rows),
            active_rows: problem.active_rows_at(&problem.pbar),
            iterations: 0,
        });
    }

    let lower = problem.sigma.cholesky_lower();
    let ybar = problem.sigma.whiten(&problem.pbar);
    // constraint l in whitened coordinates: c_l' y <= rho_l, c_l = L' a_l
    let cl = &problem.a * lower;
    let normals: Vec<DVector<f64>> = (0..rows).map(|l| -cl.row(l).transpose()).collect();
    let norm_sizes: Vec<f64> = normals.iter().map(|v| v.norm()).collect();

    let max_iter = 50 * (rows + problem.dim()) + 100;
    let mut iterations = 0usize;
    let mut y = ybar.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    // rows found numerically dependent on the working set at the current y
    let mut skipped: Vec<usize> = Vec::new();

    loop {
        // most violated constraint, measured in whitened distance
        let mut chosen: Option<(usize, f64)> = None;
        let y_norm = y.norm();
        for l in 0..rows {
            if active.contains(&l) || skipped.contains(&l) || norm_sizes[l] == 0.0 {
                if norm_sizes[l] == 0.0 && problem.rho[l] < 0.0 {
                    return Err(Error::Infeasible);
                }
                continue;
            }
            let viol = -normals[l].dot(&y) - problem.rho[l];
            let tol = 1e-11 * (1.0 + problem.rho[l].abs() + norm_sizes[l] * y_norm);
            if viol > tol {
                let score = viol / norm_sizes[l];
                if chosen.is_none_or(|(_, s)| score > s) {
                    chosen = Some((l, score));
                }
            }
        }
        let Some((p, _)) = chosen else { break };

        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::MaxIterations(max_iter));
            }
            let working: Vec<DVector<f64>> = active.iter().map(|&j| normals[j].clone()).collect();
            let step = step_directions(&working, &normals[p]);

            let mut t1 = f64::INFINITY;
            let mut drop: Option<usize> = None;
            for (idx, &rj) in step.r.iter().enumerate() {
                if rj > 0.0 {
                    let ratio = u[idx] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        drop = Some(idx);
                    }
                }
            }

            let z_norm = step.z.norm();
            let t2 = if z_norm <= 1e-12 * norm_sizes[p] {
                f64::INFINITY
            } else {
                // s_p = n_p' y - b_p with b_p = -rho_p
                let s_p = normals[p].dot(&y) + problem.rho[p];
                (-s_p / step.z.dot(&normals[p])).max(0.0)
            };

            let t = t1.min(t2);
            if t.is_infinite() {
                // A degenerate vertex can leave a dependent row violated by
                // rounding only; drop it for now rather than declare infeasibility.
                let viol = -normals[p].dot(&y) - problem.rho[p];
                let scale = 1.0 + problem.rho[p].abs() + norm_sizes[p] * y.norm();
                if u_p == 0.0 && viol <= 1e-8 * scale {
                    skipped.push(p);
                    break;
                }
                return Err(Error::Infeasible);
            }
            if t2.is_finite() && t > 0.0 {
                skipped.clear();
            }
            if t2.is_finite() {
                y.axpy(t, &step.z, 1.0);
            }
            for (idx, rj) in step.r.iter().enumerate() {
                u[idx] -= t * rj;
            }
            u_p += t;

            if t2 <= t1 {
                active.push(p);
                u.push(u_p);
                break;
            }
            let k = drop.expect("finite t1 has a blocking index");
            active.remove(k);
            u.remove(k);
        }
    }

    let mut kappa_hat = lower * &y;
    if !active.is_empty() {
        if let Some(k) = polish(problem, &ybar, &normals, &active, &mut y, &mut u) {
            kappa_hat = k;
        }
    }
    let resid = &ybar - &y;
    let statistic = n * resid.norm_squared();
    let mut multipliers = DVector::<f64>::zeros(rows);
    for (&j, &uj) in active.iter().zip(u.iter()) {
        multipliers[j] = 2.0 * n * uj.max(0.0);
    }
    let active_rows = problem.active_rows_at(&kappa_hat);
    Ok(QpSolution {
        kappa_hat,
        statistic,
        multipliers,
        active_rows,
        iterations,
    })
}

/// Re-solve the equality-constrained projection on the final working set
/// so active rows hold to rounding error rather than accumulated step error.
/// Returns the polished estimate in original coordinates.
fn polish(
    problem: &QpProblem,
    ybar: &DVector<f64>,
    normals: &[DVector<f64>],
    active: &[usize],
    y: &mut DVector<f64>,
    u: &mut [f64],
) -> Option<DVector<f64>> {
    // y = ybar - C' w with C y = rho on the working set
    let ct = DMatrix::from_columns(&active.iter().map(|&j| -&normals[j]).collect::<Vec<_>>());
    let rho_s = DVector::from_iterator(active.len(), active.iter().map(|&j| problem.rho[j]));
    let a_s = DMatrix::from_rows(
        &active
            .iter()
            .map(|&j| problem.a.row(j).clone_owned())
            .collect::<Vec<_>>(),
    );
    let r = ct.clone().qr().r();
    let gram_solve = |b: &DVector<f64>| {
        let v = r.tr_solve_upper_triangular(b)?;
        r.solve_upper_triangular(&v)
    };
    let mut w = gram_solve(&(ct.tr_mul(ybar) - &rho_s))?;
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return None;
    }
    // kappa = pbar - Sigma A_S' w, refined against A_S kappa = rho_S
    let sigma_at = problem.sigma.matrix() * a_s.transpose();
    let mut kappa = &problem.pbar - &sigma_at * &w;
    for _ in 0..2 {
        let e = &a_s * &kappa - &rho_s;
        let dw = gram_solve(&e)?;
        w += &dw;
        kappa -= &sigma_at * &dw;
    }
    if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return None;
    }
    *y = ybar - &ct * &w;
    u.copy_from_slice(w.as_slice());
    Some(kappa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_problem(pbar: f64) -> QpProblem {
        QpProblem::new(
            DVector::from_vec(vec![pbar]),
            SpdMatrix::new(DMatrix::identity(1, 1)).unwrap(),
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![0.0]),
            100,
        )
        .unwrap()
    }

    #[test]
    fn interior_point_is_its_own_projection() {
        let sol = solve_projection(&scalar_problem(-0.5)).unwrap();
        assert_eq!(sol.kappa_hat[0], -0.5);
        assert_eq!(sol.statistic, 0.0);
        assert!(sol.active_rows.is_empty());
    }

    #[test]
    fn half_line_projection() {
        let sol = solve_projection(&scalar_problem(0.5)).unwrap();
        assert_abs_diff_eq!(sol.kappa_hat[0], 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.statistic, 25.0, epsilon = 1e-12);
        assert_eq!(sol.active_rows, vec![0]);
    }

    #[test]
    fn negative_orthant_projection() {
        let p = QpProblem::new(
            DVector::from_vec(vec![1.0, 1.0]),
            SpdMatrix::new(DMatrix::identity(2, 2)).unwrap(),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            1,
        )
        .unwrap();
        let sol = solve_projection(&p).unwrap();
        assert_abs_diff_eq!(sol.kappa_hat.amax(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(sol.statistic, 2.0, epsilon = 1e-12);
        assert_eq!(sol.active_rows, vec![0, 1]);
        assert_abs_diff_eq!(sol.dual_objective(&p), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_constraint_set_is_infeasible() {
        // x <= -1 and -x <= -1
        let p = QpProblem::new(
            DVector::from_vec(vec![0.0]),
            SpdMatrix::new(DMatrix::identity(1, 1)).unwrap(),
            DMatrix::from_row_slice(2, 1, &[1.0, -1.0]),
            DVector::from_vec(vec![-1.0, -1.0]),
            10,
        )
        .unwrap();
        assert!(matches!(solve_projection(&p), Err(Error::Infeasible)));
    }

    #[test]
    fn zero_row_with_negative_rhs_is_infeasible() {
        let p = QpProblem::new(
            DVector::from_vec(vec![1.0, 0.0]),
            SpdMatrix::new(DMatrix::identity(2, 2)).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DVector::from_vec(vec![0.0, -1.0]),
            1,
        )
        .unwrap();
        assert!(matches!(solve_projection(&p), Err(Error::Infeasible)));
    }

    #[test]
    fn duplicate_rows_are_both_reported_active() {
        let p = QpProblem::new(
            DVector::from_vec(vec![1.0, 0.0]),
            SpdMatrix::new(DMatrix::identity(2, 2)).unwrap(),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 2.0, 0.0]),
            DVector::zeros(2),
            4,
        )
        .unwrap();
        let sol = solve_projection(&p).unwrap();
        assert_eq!(sol.active_rows, vec![0, 1]);
        assert_abs_diff_eq!(sol.statistic, 4.0, epsilon = 1e-12);
        let kkt = sol.kkt_report(&p);
        assert!(kkt.stationarity < 1e-12);
    }

    #[test]
    fn shape_checks() {
        let s = SpdMatrix::new(DMatrix::identity(2, 2)).unwrap();
        assert!(QpProblem::new(
            DVector::zeros(3),
            s.clone(),
            DMatrix::zeros(1, 3),
            DVector::zeros(1),
            1
        )
        .is_err());
        assert!(QpProblem::new(
            DVector::zeros(2),
            s,
            DMatrix::zeros(1, 2),
            DVector::zeros(2),
            1
        )
        .is_err());
    }
}
