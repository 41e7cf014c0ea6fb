//! First-stage plumbing for the second-stage test: the moment-model
//! interface, the Jacobian of the sample moments with respect to the
//! nuisance parameter, per-observation influence values, and the
//! influence-corrected covariance of the moments.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::{sample_covariance, SpdMatrix};

/// `B(theta) M - C(theta) N <= rho(theta)` for one parameter value.
#[derive(Clone, Debug, PartialEq)]
pub struct Constraints {
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub rho: DVector<f64>,
}

impl Constraints {
    /// `A = [B, -C]`, acting on the stacked moment vector `(M, N)`.
    pub fn a(&self) -> DMatrix<f64> {
        let k = self.b.nrows();
        let dm = self.b.ncols();
        let dn = self.c.ncols();
        let mut a = DMatrix::<f64>::zeros(k, dm + dn);
        a.view_mut((0, 0), (k, dm)).copy_from(&self.b);
        a.view_mut((0, dm), (k, dn)).copy_from(&(-&self.c));
        a
    }
}

/// A separable moment-inequality model evaluated on a fixed sample.
pub trait MomentModel: Sync {
    fn n_obs(&self) -> usize;

    fn dim_m(&self) -> usize;

    fn dim_n(&self) -> usize;

    fn dim_theta(&self) -> usize;

    fn constraints(&self, theta: &[f64]) -> Result<Constraints>;

    /// `p(W_i, theta, delta) = (M(W_i, theta), N(W_i, theta, delta))`.
    fn moment(&self, i: usize, theta: &[f64], delta: &DVector<f64>) -> Result<DVector<f64>>;

    /// Influence value `psi(W_i, delta_hat)` attached to observation `i`.
    fn observation_influence(&self, i: usize, first: &FirstStageEstimate) -> Result<DVector<f64>> {
        if first.influence.len() != self.n_obs() {
            return Err(Error::shape(
                "influence length",
                self.n_obs(),
                first.influence.len(),
            ));
        }
        Ok(first.influence[i].clone())
    }

    /// When false, the moments (and so the corrected covariance) are the
    /// same for every `theta` and may be computed once per sweep.
    fn moments_depend_on_theta(&self) -> bool {
        true
    }

    fn moment_dim(&self) -> usize {
        self.dim_m() + self.dim_n()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FirstStageEstimate {
    pub delta_hat: DVector<f64>,
    pub influence: Vec<DVector<f64>>,
    /// Sample average of the score Jacobian `dg/d delta`.
    pub g_matrix: DMatrix<f64>,
    pub converged: bool,
    pub objective_value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Per-coordinate central-difference step: `1e-5 (1 + |delta_k|)`.
pub fn default_step(delta: &DVector<f64>) -> DVector<f64> {
    delta.map(|d| 1e-5 * (1.0 + d.abs()))
}

fn mean_moment<M: MomentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    delta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let n = model.n_obs();
    let mut acc = DVector::<f64>::zeros(model.moment_dim());
    for i in 0..n {
        let p = model
            .moment(i, theta, delta)
            .map_err(|e| Error::EvaluationFailure(format!("observation {i}: {e}")))?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(Error::EvaluationFailure(format!(
                "observation {i}: non-finite moment"
            )));
        }
        acc += p;
    }
    Ok(acc / n as f64)
}

/// Central-difference Jacobian of the sample-average moments with respect
/// to `delta`, `(d_M + d_N) x dim(delta)`. `step = None` uses
/// [`default_step`]; `Some(h)` uses `h` for every coordinate.
pub fn jacobian_p_delta<M: MomentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    delta_hat: &DVector<f64>,
    step: Option<f64>,
) -> Result<DMatrix<f64>> {
    if let Some(h) = step {
        if !(h > 0.0) {
            return Err(Error::config("step", "must be positive"));
        }
    }
    let steps = match step {
        Some(h) => DVector::from_element(delta_hat.len(), h),
        None => default_step(delta_hat),
    };
    let mut jac = DMatrix::<f64>::zeros(model.moment_dim(), delta_hat.len());
    for k in 0..delta_hat.len() {
        let h = steps[k];
        let mut up = delta_hat.clone();
        up[k] += h;
        let mut down = delta_hat.clone();
        down[k] -= h;
        let col = (mean_moment(model, theta, &up)? - mean_moment(model, theta, &down)?) / (2.0 * h);
        jac.set_column(k, &col);
    }
    Ok(jac)
}

#[derive(Clone, Debug)]
pub struct CorrectedCovariance {
    /// `(1/n) sum_i v_i v_i'` with `v_i = p_i + P psi_i`, before regularisation.
    pub raw: DMatrix<f64>,
    /// The ridge actually added to the diagonal.
    pub ridge: f64,
    pub sigma: SpdMatrix,
}

/// Adds the smallest ridge that makes `m` factorise: start from
/// `max(0, floor - lambda_min)` with `floor = 1e-10 trace/dim`, then
/// escalate by 10x up to `1e-6 trace/dim`.
pub fn regularize_spd(m: &DMatrix<f64>) -> Result<(SpdMatrix, f64)> {
    let dim = m.nrows();
    let trace = m.trace();
    let scale = if trace > 0.0 { trace / dim as f64 } else { 1.0 };
    let floor = 1e-10 * scale;
    let cap = 1e-6 * scale;
    let lambda_min = SymmetricEigen::new(m.clone())
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let mut ridge = (floor - lambda_min).max(0.0);
    loop {
        let mut candidate = m.clone();
        for i in 0..dim {
            candidate[(i, i)] += ridge;
        }
        match SpdMatrix::new(candidate) {
            Ok(s) => return Ok((s, ridge)),
            Err(e @ Error::NotSymmetric { .. }) => return Err(e),
            Err(e) => {
                ridge = ridge.max(floor) * 10.0;
                if ridge > cap {
                    return Err(e);
                }
            }
        }
    }
}

/// Influence-corrected covariance from precomputed moments and influence values.
pub fn corrected_covariance_from(
    moments: &[DVector<f64>],
    influence: &[DVector<f64>],
    p: &DMatrix<f64>,
) -> Result<CorrectedCovariance> {
    if moments.len() != influence.len() {
        return Err(Error::shape(
            "corrected_covariance observations",
            moments.len(),
            influence.len(),
        ));
    }
    if moments.len() < 2 {
        return Err(Error::shape(
            "corrected_covariance observations",
            ">= 2",
            moments.len(),
        ));
    }
    let dim = moments[0].len();
    if p.nrows() != dim {
        return Err(Error::shape("Jacobian rows", dim, p.nrows()));
    }
    let mut corrected = Vec::with_capacity(moments.len());
    for (pi, psi) in moments.iter().zip(influence) {
        if pi.len() != dim {
            return Err(Error::shape("moment length", dim, pi.len()));
        }
        if psi.len() != p.ncols() {
            return Err(Error::shape("influence length", p.ncols(), psi.len()));
        }
        corrected.push(pi + p * psi);
    }
    let raw = sample_covariance(&corrected, false)?;
    let (sigma, ridge) = regularize_spd(&raw)?;
    Ok(CorrectedCovariance { raw, ridge, sigma })
}

/// All moments `p(W_i, theta, delta)` of a model.
pub fn moments_at<M: MomentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    delta: &DVector<f64>,
) -> Result<Vec<DVector<f64>>> {
    (0..model.n_obs())
        .map(|i| model.moment(i, theta, delta))
        .collect()
}

pub fn corrected_covariance<M: MomentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    first_stage: &FirstStageEstimate,
    p: &DMatrix<f64>,
) -> Result<CorrectedCovariance> {
    let moments = moments_at(model, theta, &first_stage.delta_hat)?;
    let influence = (0..model.n_obs())
        .map(|i| model.observation_influence(i, first_stage))
        .collect::<Result<Vec<_>>>()?;
    corrected_covariance_from(&moments, &influence, p)
}

/// Influence values `psi_i` and the Jacobian `G` for a moment-based
/// first-stage estimator with per-observation scores `g_i(delta)`.
///
/// For an exactly identified score `psi_i = -G^{-1} g_i`; otherwise the
/// GMM form `-(G'WG)^{-1} G'W g_i` is used with the supplied weight.
pub fn influence_from_scores<F>(
    n: usize,
    delta_hat: &DVector<f64>,
    weight: Option<&DMatrix<f64>>,
    score: F,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)>
where
    F: Fn(usize, &DVector<f64>) -> DVector<f64>,
{
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let dim = delta_hat.len();
    let scores: Vec<DVector<f64>> = (0..n).map(|i| score(i, delta_hat)).collect();
    let m = scores[0].len();
    let steps = default_step(delta_hat);

    let mut g = DMatrix::<f64>::zeros(m, dim);
    for k in 0..dim {
        let mut up = delta_hat.clone();
        up[k] += steps[k];
        let mut down = delta_hat.clone();
        down[k] -= steps[k];
        let mut col = DVector::<f64>::zeros(m);
        for i in 0..n {
            col += (score(i, &up) - score(i, &down)) / (2.0 * steps[k]);
        }
        g.set_column(k, &(col / n as f64));
    }

    // psi_i = -K g_i
    let k_mat = if m == dim {
        check_condition(&g)?;
        g.clone().lu().try_inverse().ok_or(Error::SingularG {
            condition: f64::INFINITY,
        })?
    } else {
        let w = match weight {
            Some(w) => w.clone(),
            None => DMatrix::identity(m, m),
        };
        if w.nrows() != m || w.ncols() != m {
            return Err(Error::shape("GMM weight", m, w.nrows()));
        }
        let gwg = g.transpose() * &w * &g;
        check_condition(&gwg)?;
        let inv = gwg.lu().try_inverse().ok_or(Error::SingularG {
            condition: f64::INFINITY,
        })?;
        inv * g.transpose() * w
    };
    let influence = scores.iter().map(|gi| -(&k_mat * gi)).collect();
    Ok((influence, g))
}

fn check_condition(m: &DMatrix<f64>) -> Result<()> {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    let condition = if min > 0.0 { max / min } else { f64::INFINITY };
    if !(condition <= 1e10) {
        return Err(Error::SingularG { condition });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// p_i = H delta + c_i with M block equal to c_i's first entries.
    struct LinearModel {
        h: DMatrix<f64>,
        c: Vec<DVector<f64>>,
    }

    impl MomentModel for LinearModel {
        fn n_obs(&self) -> usize {
            self.c.len()
        }
        fn dim_m(&self) -> usize {
            0
        }
        fn dim_n(&self) -> usize {
            self.h.nrows()
        }
        fn dim_theta(&self) -> usize {
            0
        }
        fn constraints(&self, _theta: &[f64]) -> Result<Constraints> {
            let k = self.h.nrows();
            Ok(Constraints {
                b: DMatrix::zeros(k, 0),
                c: DMatrix::identity(k, k),
                rho: DVector::zeros(k),
            })
        }
        fn moment(&self, i: usize, _theta: &[f64], delta: &DVector<f64>) -> Result<DVector<f64>> {
            Ok(&self.h * delta + &self.c[i])
        }
    }

    #[test]
    fn linear_model_jacobian_is_exact() {
        let h = DMatrix::from_row_slice(3, 2, &[1.0, -2.0, 0.5, 3.0, 0.0, 7.0]);
        let model = LinearModel {
            h: h.clone(),
            c: vec![DVector::from_vec(vec![1.0, 2.0, 3.0]); 4],
        };
        for step in [1e-3, 1e-4, 1e-5] {
            let j = jacobian_p_delta(&model, &[], &DVector::from_vec(vec![0.3, -1.2]), Some(step))
                .unwrap();
            assert!((j - &h).amax() < 1e-9);
        }
    }

    #[test]
    fn delta_free_model_has_zero_jacobian() {
        let model = LinearModel {
            h: DMatrix::zeros(2, 3),
            c: vec![
                DVector::from_vec(vec![1.0, 2.0]),
                DVector::from_vec(vec![0.0, 1.0]),
            ],
        };
        let j =
            jacobian_p_delta(&model, &[], &DVector::from_vec(vec![1.0, 2.0, 3.0]), None).unwrap();
        assert_eq!(j, DMatrix::zeros(2, 3));
    }

    #[test]
    fn constraint_matrix_layout() {
        let c = Constraints {
            b: DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
            c: DMatrix::identity(2, 2),
            rho: DVector::zeros(2),
        };
        assert_eq!(
            c.a(),
            DMatrix::from_row_slice(2, 3, &[1.0, -1.0, 0.0, 2.0, 0.0, -1.0])
        );
    }

    #[test]
    fn ridge_fills_null_direction() {
        let moments = vec![
            DVector::from_vec(vec![1.0, 0.0]),
            DVector::from_vec(vec![-1.0, 0.0]),
        ];
        let psi = vec![DVector::zeros(1), DVector::zeros(1)];
        let cov = corrected_covariance_from(&moments, &psi, &DMatrix::zeros(2, 1)).unwrap();
        assert_eq!(
            cov.raw,
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])
        );
        assert!(cov.ridge > 0.0 && cov.ridge <= 1e-6);
        let s = cov.sigma.matrix();
        assert_abs_diff_eq!(s[(0, 0)], 1.0, epsilon = 1e-9);
        assert_eq!(s[(0, 1)], 0.0);
        assert_abs_diff_eq!(s[(1, 1)], cov.ridge, epsilon = 1e-20);
    }

    #[test]
    fn shape_errors() {
        let moments = vec![DVector::from_vec(vec![1.0, 0.0]); 3];
        let psi = vec![DVector::zeros(2); 3];
        assert!(matches!(
            corrected_covariance_from(&moments, &psi, &DMatrix::zeros(2, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            corrected_covariance_from(&moments, &psi[..2], &DMatrix::zeros(2, 2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn scalar_linear_score_influence() {
        // g(W, delta) = z (delta - w)
        let z = [1.0, 2.0, 0.5, 1.5];
        let w = [0.2, -0.4, 1.0, 0.7];
        let delta_hat = DVector::from_vec(vec![0.35]);
        let (psi, g) = influence_from_scores(4, &delta_hat, None, |i, d| {
            DVector::from_vec(vec![z[i] * (d[0] - w[i])])
        })
        .unwrap();
        let zbar = z.iter().sum::<f64>() / 4.0;
        assert_abs_diff_eq!(g[(0, 0)], zbar, epsilon = 1e-9);
        for i in 0..4 {
            assert_abs_diff_eq!(psi[i][0], -z[i] * (0.35 - w[i]) / zbar, epsilon = 1e-9);
        }
    }

    #[test]
    fn zero_scores_have_zero_influence() {
        let (psi, _) =
            influence_from_scores(3, &DVector::from_vec(vec![1.0, 2.0]), None, |i, d| {
                let x = [1.0, 2.0, 3.0][i];
                // residual vanishes at delta = (1, 2)
                let r = d[0] + x * d[1] - (1.0 + 2.0 * x);
                DVector::from_vec(vec![r, x * r])
            })
            .unwrap();
        for p in psi {
            assert!(p.amax() < 1e-12);
        }
    }

    #[test]
    fn singular_g_is_reported() {
        let res = influence_from_scores(2, &DVector::from_vec(vec![0.0, 0.0]), None, |_, d| {
            DVector::from_vec(vec![d[0] + d[1], d[0] + d[1]])
        });
        assert!(matches!(res, Err(Error::SingularG { .. })));
    }
}
