//! Instance generators and independent oracles shared by integration tests.

#![allow(dead_code)]

use momineq::qp::QpProblem;
use momineq::stats::SpdMatrix;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Random integer matrix with entries in `[-3, 3]`.
pub fn int_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-3i32..=3) as f64)
}

/// Elimination instance with `k <= 6`, `d_M <= 3`, `d_N <= 2`.
pub fn elimination_instance(rng: &mut ChaCha8Rng) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let k = rng.random_range(1..=6);
    let dm = rng.random_range(1..=3);
    let dn = rng.random_range(1..=2);
    let b = int_matrix(rng, k, dm);
    let c = int_matrix(rng, k, dn);
    let d = DVector::from_fn(k, |_, _| rng.random_range(-3i32..=3) as f64);
    (b, c, d)
}

/// Half-integer point in `[-3, 3]^dm`, so boundary cases occur often.
pub fn half_integer_point(rng: &mut ChaCha8Rng, dm: usize) -> DVector<f64> {
    DVector::from_fn(dm, |_, _| rng.random_range(-6i32..=6) as f64 / 2.0)
}

/// Fourier-Motzkin decision of whether `{x : G x >= r}` is nonempty.
pub fn fm_feasible(g: &DMatrix<f64>, r: &DVector<f64>) -> bool {
    let mut rows: Vec<(Vec<f64>, f64)> = (0..g.nrows())
        .map(|i| (g.row(i).iter().copied().collect(), r[i]))
        .collect();
    for var in 0..g.ncols() {
        let (mut pos, mut neg, mut zero) = (Vec::new(), Vec::new(), Vec::new());
        for (coef, rhs) in rows {
            let c = coef[var];
            if c.abs() < 1e-12 {
                zero.push((coef, rhs));
            } else if c > 0.0 {
                pos.push((coef, rhs));
            } else {
                neg.push((coef, rhs));
            }
        }
        let mut next = zero;
        for (pc, pr) in &pos {
            for (nc, nr) in &neg {
                // pc/p + nc/|n| eliminates the variable
                let (p, n) = (pc[var], -nc[var]);
                let coef: Vec<f64> = pc.iter().zip(nc).map(|(a, b)| a / p + b / n).collect();
                next.push((coef, pr / p + nr / n));
            }
        }
        rows = next;
    }
    rows.iter().all(|(_, rhs)| *rhs <= 1e-9 * (1.0 + rhs.abs()))
}

pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> SpdMatrix {
    let l = DMatrix::from_fn(d, d, |_, _| normal(rng));
    SpdMatrix::new(&l * l.transpose() / d as f64 + DMatrix::identity(d, d) * 0.2).unwrap()
}

/// Random feasible projection problem; roughly a third of the rows pass
/// through a common feasible point.
pub fn random_qp(rng: &mut ChaCha8Rng, dim: usize, rows: usize) -> QpProblem {
    let a = DMatrix::from_fn(rows, dim, |_, _| normal(rng));
    let anchor = DVector::from_fn(dim, |_, _| normal(rng));
    let ak = &a * &anchor;
    let rho = DVector::from_fn(rows, |i, _| {
        if rng.random::<f64>() < 0.35 {
            ak[i]
        } else {
            ak[i] + rng.random_range(0.0..2.0)
        }
    });
    let pbar = DVector::from_fn(dim, |_, _| 2.0 * normal(rng));
    let sigma = random_spd(rng, dim);
    let n = rng.random_range(1..=500);
    QpProblem::new(pbar, sigma, a, rho, n).unwrap()
}

pub fn objective(p: &QpProblem, k: &DVector<f64>) -> f64 {
    let d = &p.pbar - k;
    p.n as f64 * d.dot(&p.sigma.solve(&d))
}

pub fn feasible(p: &QpProblem, k: &DVector<f64>, tol: f64) -> bool {
    let s = &p.a * k - &p.rho;
    s.iter().all(|&v| v <= tol)
}

/// Exact 2-D oracle: the minimizer is the unconstrained point, the
/// projection onto a single constraint line, or a vertex of two lines.
pub fn qp2_exact(p: &QpProblem) -> f64 {
    assert_eq!(p.dim(), 2);
    let mut candidates = vec![p.pbar.clone()];
    for i in 0..p.rows() {
        let a = p.a.row(i).transpose();
        // minimise (pbar - k)' W (pbar - k) subject to a'k = rho_i
        let sa = p.sigma.matrix() * &a;
        let t = (a.dot(&p.pbar) - p.rho[i]) / a.dot(&sa);
        candidates.push(&p.pbar - sa * t);
        for j in (i + 1)..p.rows() {
            let m = DMatrix::from_rows(&[p.a.row(i).clone_owned(), p.a.row(j).clone_owned()]);
            if let Some(inv) = m.clone().try_inverse() {
                if m.determinant().abs() > 1e-10 {
                    candidates.push(inv * DVector::from_vec(vec![p.rho[i], p.rho[j]]));
                }
            }
        }
    }
    candidates
        .iter()
        .filter(|k| feasible(p, k, 1e-9))
        .map(|k| objective(p, k))
        .fold(f64::INFINITY, f64::min)
}

/// Grid search over a box around the unconstrained point, followed by
/// sixty rounds of shrinking local refinement of the best feasible grid point.
pub fn qp2_grid(p: &QpProblem, exact_hint: f64) -> f64 {
    assert_eq!(p.dim(), 2);
    let lambda_min = p.sigma.matrix().clone().symmetric_eigen().eigenvalues.min();
    // every point with objective <= hint lies within this radius of pbar
    let radius = ((exact_hint / p.n as f64)
        * p.sigma.matrix().clone().symmetric_eigen().eigenvalues.max())
    .sqrt()
    .max(lambda_min.sqrt() * 1e-3)
        + 1e-3;
    let mut centre = p.pbar.clone();
    let mut half = 1.5 * radius;
    let mut best = f64::INFINITY;
    for round in 0..60 {
        let steps = if round == 0 { 400 } else { 100 };
        let h = 2.0 * half / steps as f64;
        let mut best_pt = None;
        for i in 0..=steps {
            for j in 0..=steps {
                let k = DVector::from_vec(vec![
                    centre[0] - half + h * i as f64,
                    centre[1] - half + h * j as f64,
                ]);
                if feasible(p, &k, 0.0) {
                    let v = objective(p, &k);
                    if v < best {
                        best = v;
                        best_pt = Some(k);
                    }
                }
            }
        }
        if let Some(k) = best_pt {
            centre = k;
        }
        half = if round == 0 { 4.0 * h } else { 0.7 * half };
    }
    best
}
