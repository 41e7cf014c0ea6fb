//! Refined chi-squared test of a hypothesised parameter value.
//!
//! The critical value is the `1 - beta` quantile of a chi-squared with `r`
//! degrees of freedom, `r` the rank of the active constraint rows. When
//! exactly one independent constraint binds, `beta` is raised from `alpha`
//! towards `2 alpha` according to how far the remaining constraints are
//! from binding.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::polyhedra::numerical_rank;
use crate::qp::{solve_projection, QpProblem, QpSolution, ACTIVE_TOL};
use crate::stats::{chi2_quantile, std_normal_cdf, SpdMatrix};

/// Relative singular-value threshold for the active rank.
pub const RANK_TOL: f64 = 1e-10;
const DENOM_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RccResult {
    pub statistic: f64,
    pub r_hat: usize,
    /// Standardised slack; `None` unless `r_hat == 1`. Infinite values are
    /// serialised as `null` by JSON writers, so `z_infinite` disambiguates.
    pub z: Option<f64>,
    pub z_infinite: bool,
    pub beta: f64,
    pub critical: f64,
    pub reject: bool,
    pub active_rows: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

/// Numerical rank of the rows of `a` listed in `active_rows`.
pub fn active_rank(a: &DMatrix<f64>, active_rows: &[usize]) -> usize {
    if active_rows.is_empty() {
        return 0;
    }
    numerical_rank(&a.select_rows(active_rows.iter()), RANK_TOL)
}

fn row(a: &DMatrix<f64>, l: usize) -> DVector<f64> {
    a.row(l).transpose()
}

/// Standardised slack of row `j` relative to the anchor `a1`; negative
/// values are clamped to zero.
fn z_component(
    a1: &DVector<f64>,
    a1_norm: f64,
    aj: &DVector<f64>,
    slack: f64,
    sigma: &SpdMatrix,
    n: usize,
) -> f64 {
    let aj_norm = sigma.norm(aj);
    let product = a1_norm * aj_norm;
    let denom = product - sigma.bilinear(a1, aj);
    if denom.abs() <= DENOM_TOL * product || product == 0.0 {
        return f64::INFINITY;
    }
    let z = (n as f64).sqrt() * a1_norm * slack / denom;
    z.max(0.0)
}

fn infimum_z(
    a: &DMatrix<f64>,
    rho: &DVector<f64>,
    kappa_hat: &DVector<f64>,
    sigma: &SpdMatrix,
    n: usize,
    anchor: usize,
    rows: impl Iterator<Item = usize>,
) -> f64 {
    let a1 = row(a, anchor);
    let a1_norm = sigma.norm(&a1);
    let mut inf = f64::INFINITY;
    for j in rows {
        if j == anchor {
            continue;
        }
        let aj = row(a, j);
        let slack = rho[j] - aj.dot(kappa_hat);
        inf = inf.min(z_component(&a1, a1_norm, &aj, slack, sigma, n));
    }
    inf
}

fn check_anchor(
    a: &DMatrix<f64>,
    rho: &DVector<f64>,
    kappa_hat: &DVector<f64>,
    anchor_row: usize,
) -> Result<()> {
    if anchor_row >= a.nrows() {
        return Err(Error::AnchorNotActive(anchor_row));
    }
    let a1 = row(a, anchor_row);
    if a1.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroAnchorRow(anchor_row));
    }
    let resid = a1.dot(kappa_hat) - rho[anchor_row];
    if resid.abs() > ACTIVE_TOL * (1.0 + rho[anchor_row].abs()) {
        return Err(Error::AnchorNotActive(anchor_row));
    }
    Ok(())
}

/// Infimum of the standardised slacks `z_j` over all rows `j != anchor_row`.
/// An empty infimum is `+inf`.
pub fn slackness_z(
    a: &DMatrix<f64>,
    rho: &DVector<f64>,
    kappa_hat: &DVector<f64>,
    sigma: &SpdMatrix,
    n: usize,
    anchor_row: usize,
) -> Result<f64> {
    check_anchor(a, rho, kappa_hat, anchor_row)?;
    Ok(infimum_z(
        a,
        rho,
        kappa_hat,
        sigma,
        n,
        anchor_row,
        0..a.nrows(),
    ))
}

/// Decision of the refined chi-squared test given a solved projection.
pub fn rcc_decide(
    qp: &QpSolution,
    a: &DMatrix<f64>,
    rho: &DVector<f64>,
    sigma: &SpdMatrix,
    n: usize,
    alpha: f64,
) -> Result<RccResult> {
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let r_hat = active_rank(a, &qp.active_rows);
    let mut z = None;
    let mut diagnostic = None;
    let beta = if r_hat == 1 {
        let anchor = qp
            .active_rows
            .iter()
            .copied()
            .find(|&l| a.row(l).iter().any(|&v| v != 0.0));
        match anchor {
            Some(anchor) => {
                let inactive = (0..a.nrows()).filter(|l| !qp.active_rows.contains(l));
                let zv = infimum_z(a, rho, &qp.kappa_hat, sigma, n, anchor, inactive);
                z = Some(zv);
                2.0 * alpha * std_normal_cdf(zv)
            }
            None => {
                diagnostic =
                    Some("rank one but every active row is zero; using beta = alpha".into());
                alpha
            }
        }
    } else {
        alpha
    };
    // alpha = 1/2 with z = +inf puts the level at 0, whose quantile is 0
    let critical = if beta >= 1.0 {
        0.0
    } else {
        chi2_quantile(r_hat, 1.0 - beta)?
    };
    Ok(RccResult {
        statistic: qp.statistic,
        r_hat,
        z_infinite: z.is_some_and(f64::is_infinite),
        z,
        beta,
        critical,
        reject: qp.statistic > critical,
        active_rows: qp.active_rows.clone(),
        diagnostic,
    })
}

/// Solves the projection and applies the test in one call.
pub fn rcc_test(problem: &QpProblem, alpha: f64) -> Result<(QpSolution, RccResult)> {
    let sol = solve_projection(problem)?;
    let res = rcc_decide(
        &sol,
        &problem.a,
        &problem.rho,
        &problem.sigma,
        problem.n,
        alpha,
    )?;
    Ok((sol, res))
}
