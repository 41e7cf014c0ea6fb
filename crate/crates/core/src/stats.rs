//! Numerical kernels shared by the rest of the crate: the standard normal
//! CDF, chi-squared quantiles, a Cholesky-backed SPD matrix type and
//! sample second-moment matrices.

use std::cmp::Ordering;
use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Standard normal cumulative distribution function.
pub fn std_normal_cdf(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    0.5 * libm::erfc(-x / SQRT_2)
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for `a > 0` (Lanczos approximation).
pub fn ln_gamma(a: f64) -> f64 {
    if a < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * a).sin()).ln() - ln_gamma(1.0 - a);
    }
    let a = a - 1.0;
    let mut sum = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        sum += c / (a + i as f64);
    }
    let t = a + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (a + 0.5) * t.ln() - t + sum.ln()
}

/// Regularized lower incomplete gamma function `P(a, x)`.
pub fn regularized_gamma_p(a: f64, x: f64) -> f64 {
    debug_assert!(a > 0.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x.is_infinite() {
        return 1.0;
    }
    let log_prefix = -x + a * x.ln() - ln_gamma(a);
    if x < a + 1.0 {
        // power series
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..10_000 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-17 {
                break;
            }
        }
        (sum.ln() + log_prefix).exp().min(1.0)
    } else {
        // continued fraction for Q(a, x), modified Lentz
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (h.ln() + log_prefix).exp();
        (1.0 - q).clamp(0.0, 1.0)
    }
}

/// Chi-squared CDF with `df` degrees of freedom. `df = 0` is the point mass at zero.
pub fn chi2_cdf(df: usize, q: f64) -> f64 {
    if df == 0 {
        return if q >= 0.0 { 1.0 } else { 0.0 };
    }
    regularized_gamma_p(df as f64 / 2.0, q / 2.0)
}

fn chi2_pdf(df: usize, q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let k = df as f64 / 2.0;
    ((k - 1.0) * (q / 2.0).ln() - q / 2.0 - ln_gamma(k)).exp() / 2.0
}

/// Quantile of the chi-squared distribution.
///
/// Brackets the root of `P(df/2, q/2) = p` and refines it with safeguarded
/// Newton steps. `df = 0` returns 0 for every `p`.
pub fn chi2_quantile(df: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidProbability(p));
    }
    if df == 0 {
        return Ok(0.0);
    }
    let f = |q: f64| chi2_cdf(df, q) - p;

    let mut lo = 0.0;
    let mut hi = (df as f64).max(1.0);
    while f(hi) < 0.0 {
        lo = hi;
        hi *= 2.0;
    }

    let mut q = 0.5 * (lo + hi);
    for _ in 0..200 {
        let fq = f(q);
        if fq.abs() <= 1e-14 {
            break;
        }
        if fq < 0.0 {
            lo = q;
        } else {
            hi = q;
        }
        let pdf = chi2_pdf(df, q);
        let newton = if pdf > 0.0 { q - fq / pdf } else { f64::NAN };
        q = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if hi - lo <= 1e-15 * hi.max(1e-300) {
            break;
        }
    }
    Ok(q)
}

/// A symmetric positive-definite matrix together with its lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    matrix: DMatrix<f64>,
    lower: DMatrix<f64>,
}

impl SpdMatrix {
    pub fn new(matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape(
                "SpdMatrix",
                "square matrix",
                format!("{}x{}", matrix.nrows(), matrix.ncols()),
            ));
        }
        let asymmetry = relative_asymmetry(&matrix);
        if asymmetry > 1e-12 {
            return Err(Error::NotSymmetric { asymmetry });
        }
        let lower = cholesky_lower(&matrix)?;
        Ok(Self { matrix, lower })
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Lower-triangular `L` with `L L' = S`.
    pub fn cholesky_lower(&self) -> &DMatrix<f64> {
        &self.lower
    }

    /// Solves `L y = v`.
    pub fn whiten(&self, v: &DVector<f64>) -> DVector<f64> {
        forward_substitute(&self.lower, v)
    }

    pub fn solve(&self, v: &DVector<f64>) -> DVector<f64> {
        let y = forward_substitute(&self.lower, v);
        backward_substitute_transpose(&self.lower, &y)
    }

    /// `a' S a`.
    pub fn quad(&self, a: &DVector<f64>) -> f64 {
        a.dot(&(&self.matrix * a))
    }

    /// `a' S b`.
    pub fn bilinear(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        a.dot(&(&self.matrix * b))
    }

    /// `‖a‖_S = (a' S a)^{1/2}`.
    pub fn norm(&self, a: &DVector<f64>) -> f64 {
        self.quad(a).max(0.0).sqrt()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        SpdMatrix::new(&self.matrix * c)
    }
}

/// Solves `S x = v` for a symmetric positive-definite `S`.
pub fn spd_solve(s: &SpdMatrix, v: &DVector<f64>) -> Result<DVector<f64>> {
    if v.len() != s.dim() {
        return Err(Error::shape("spd_solve", s.dim(), v.len()));
    }
    Ok(s.solve(v))
}

fn relative_asymmetry(m: &DMatrix<f64>) -> f64 {
    let scale = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst / scale
}

pub(crate) fn cholesky_lower(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut diag = m[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j });
        }
        let d = diag.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            // symmetric input: read the lower triangle only
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

fn forward_substitute(l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut y = v.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)];
    }
    y
}

fn backward_substitute_transpose(l: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    let n = l.nrows();
    let mut x = y.clone();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Lexicographic total order on rows; used to fix the summation order so
/// that reductions do not depend on how the observations were ordered.
pub(crate) fn canonical_order(rows: &[DVector<f64>]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..rows.len()).collect();
    idx.sort_by(|&a, &b| {
        for (x, y) in rows[a].iter().zip(rows[b].iter()) {
            match x.total_cmp(y) {
                Ordering::Equal => continue,
                other => return other,
            }
        }
        Ordering::Equal
    });
    idx
}

/// Average outer product of the rows, optionally after centering at the
/// sample mean. The divisor is `n` in both cases.
pub fn sample_covariance(rows: &[DVector<f64>], center: bool) -> Result<DMatrix<f64>> {
    let first = rows.first().ok_or(Error::EmptyData)?;
    let dim = first.len();
    for (row, r) in rows.iter().enumerate() {
        if r.len() != dim {
            return Err(Error::RaggedRows {
                row,
                expected: dim,
                found: r.len(),
            });
        }
    }
    let order = canonical_order(rows);
    let n = rows.len() as f64;

    let mean = if center {
        let mut m = DVector::<f64>::zeros(dim);
        for &i in &order {
            m += &rows[i];
        }
        m / n
    } else {
        DVector::zeros(dim)
    };

    let mut acc = DMatrix::<f64>::zeros(dim, dim);
    for &i in &order {
        let d = &rows[i] - &mean;
        acc.ger(1.0, &d, &d, 1.0);
    }
    acc /= n;
    symmetrize(&mut acc);
    Ok(acc)
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}
