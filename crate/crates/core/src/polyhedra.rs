//! Direct elimination of a linear nuisance block.
//!
//! For `B mu - C delta <= d`, a `delta` exists iff `A mu <= b` with
//! `A = H B`, `b = H d`, where the rows of `H` are the vertices of
//! `{h >= 0, C'h = 0, 1'h = 1}`. Vertices are found by brute-force basis
//! enumeration, so this is only practical for small `k`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Default cap on the number of inequalities for vertex enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 15;

const FEAS_TOL: f64 = 1e-9;
const DEDUP_TOL: f64 = 1e-7;
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct EliminationResult {
    /// Vertices of the polyhedron, one per row (`m x k`).
    pub h: DMatrix<f64>,
    /// `H B` (`m x d_M`).
    pub a: DMatrix<f64>,
    /// `H d` (length `m`).
    pub b: DVector<f64>,
}

/// Iterator over `r`-subsets of `0..n` in lexicographic order.
pub(crate) struct Combinations {
    idx: Vec<usize>,
    n: usize,
    first: bool,
    done: bool,
}

impl Combinations {
    pub(crate) fn new(n: usize, r: usize) -> Self {
        Self {
            idx: (0..r).collect(),
            n,
            first: true,
            done: r > n,
        }
    }
}

impl Iterator for Combinations {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        if self.first {
            self.first = false;
            return Some(self.idx.clone());
        }
        let r = self.idx.len();
        let mut i = r;
        while i > 0 {
            i -= 1;
            if self.idx[i] < self.n - r + i {
                self.idx[i] += 1;
                for j in (i + 1)..r {
                    self.idx[j] = self.idx[j - 1] + 1;
                }
                return Some(self.idx.clone());
            }
        }
        self.done = true;
        None
    }
}

pub(crate) fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().cloned().fold(0.0_f64, f64::max);
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Solves `m x = rhs` for a tall matrix with full column rank; returns
/// `None` when `m` is column-rank deficient or the system is inconsistent.
fn solve_full_column_rank(m: &DMatrix<f64>, rhs: &DVector<f64>) -> Option<DVector<f64>> {
    let cols = m.ncols();
    if numerical_rank(m, RANK_TOL) < cols {
        return None;
    }
    // square subsystem on a greedy set of independent rows
    let mut picked: Vec<usize> = Vec::with_capacity(cols);
    for i in 0..m.nrows() {
        let mut trial = picked.clone();
        trial.push(i);
        if numerical_rank(&m.select_rows(trial.iter()), RANK_TOL) == trial.len() {
            picked = trial;
            if picked.len() == cols {
                break;
            }
        }
    }
    let square = m.select_rows(picked.iter());
    let sub_rhs = DVector::from_iterator(cols, picked.iter().map(|&i| rhs[i]));
    let x = square.lu().solve(&sub_rhs)?;
    let resid = (m * &x - rhs).amax();
    let scale = 1.0 + rhs.amax();
    (resid <= FEAS_TOL * scale).then_some(x)
}

fn lexicographic_desc(a: &DVector<f64>, b: &DVector<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        match y.total_cmp(x) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

/// Vertices of `{h >= 0, C'h = 0, 1'h = 1}` for a `k x d_N` matrix `C`,
/// sorted lexicographically (largest first).
pub fn enumerate_h(c: &DMatrix<f64>) -> Result<Vec<DVector<f64>>> {
    enumerate_h_with_cap(c, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_h_with_cap(c: &DMatrix<f64>, cap: usize) -> Result<Vec<DVector<f64>>> {
    let k = c.nrows();
    let dn = c.ncols();
    if k == 0 {
        return Err(Error::shape("enumerate_h", "k >= 1 rows", 0));
    }
    if k > cap {
        return Err(Error::DimensionTooLarge {
            what: "vertex enumeration rows",
            found: k,
            cap,
        });
    }

    // equality block [C'; 1'] h = (0, ..., 0, 1)
    let mut eq = DMatrix::<f64>::zeros(dn + 1, k);
    for i in 0..k {
        for j in 0..dn {
            eq[(j, i)] = c[(i, j)];
        }
        eq[(dn, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(dn + 1);
    rhs[dn] = 1.0;

    let r = numerical_rank(&eq, RANK_TOL);
    let mut vertices: Vec<DVector<f64>> = Vec::new();
    for support in Combinations::new(k, r) {
        let sub = eq.select_columns(support.iter());
        let Some(hs) = solve_full_column_rank(&sub, &rhs) else {
            continue;
        };
        if hs.iter().any(|&v| v < -FEAS_TOL) {
            continue;
        }
        let mut h = DVector::<f64>::zeros(k);
        for (pos, &i) in support.iter().enumerate() {
            h[i] = hs[pos].max(0.0);
        }
        if vertices.iter().all(|v| (v - &h).amax() > DEDUP_TOL) {
            vertices.push(h);
        }
    }
    vertices.sort_by(lexicographic_desc);
    Ok(vertices)
}

/// Eliminates the nuisance block: `A = H(C) B`, `b = H(C) d`.
pub fn eliminate_nuisance(
    b_mat: &DMatrix<f64>,
    c_mat: &DMatrix<f64>,
    d: &DVector<f64>,
) -> Result<EliminationResult> {
    let k = b_mat.nrows();
    if c_mat.nrows() != k || d.len() != k {
        return Err(Error::shape(
            "eliminate_nuisance",
            format!("{k} rows in B, C and d"),
            format!("C: {}, d: {}", c_mat.nrows(), d.len()),
        ));
    }
    let vertices = enumerate_h(c_mat)?;
    let mut h = DMatrix::<f64>::zeros(vertices.len(), k);
    for (row, v) in vertices.iter().enumerate() {
        h.set_row(row, &v.transpose());
    }
    let a = &h * b_mat;
    let b = &h * d;
    Ok(EliminationResult { h, a, b })
}

/// Decides whether `{delta : C delta >= B mu - d}` is nonempty by checking
/// every candidate vertex of the (reparametrised, pointed) polyhedron.
pub fn nuisance_feasible(
    b_mat: &DMatrix<f64>,
    c_mat: &DMatrix<f64>,
    d: &DVector<f64>,
    mu: &DVector<f64>,
) -> Result<bool> {
    let k = b_mat.nrows();
    if c_mat.nrows() != k || d.len() != k || mu.len() != b_mat.ncols() {
        return Err(Error::shape(
            "nuisance_feasible",
            format!("k = {k}, d_M = {}", b_mat.ncols()),
            format!("C rows {}, d {}, mu {}", c_mat.nrows(), d.len(), mu.len()),
        ));
    }
    if c_mat.ncols() > 3 {
        return Err(Error::DimensionTooLarge {
            what: "nuisance dimension",
            found: c_mat.ncols(),
            cap: 3,
        });
    }
    if k > 8 {
        return Err(Error::DimensionTooLarge {
            what: "inequality count",
            found: k,
            cap: 8,
        });
    }
    let v = b_mat * mu - d;
    let tol = |i: usize| FEAS_TOL * (1.0 + v[i].abs());

    // Restrict delta to the row space of C so the polyhedron is pointed.
    let svd = c_mat.clone().svd(false, true);
    let v_t = svd.v_t.expect("requested V'");
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let basis: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| smax > 0.0 && s > RANK_TOL * smax)
        .map(|(i, _)| i)
        .collect();
    if basis.is_empty() {
        return Ok((0..k).all(|i| v[i] <= tol(i)));
    }
    let vr = v_t.select_rows(basis.iter()).transpose();
    let cr = c_mat * &vr;
    let r = basis.len();

    for rows in Combinations::new(k, r) {
        let sub = cr.select_rows(rows.iter());
        let rhs = DVector::from_iterator(r, rows.iter().map(|&i| v[i]));
        if numerical_rank(&sub, RANK_TOL) < r {
            continue;
        }
        let Some(y) = sub.lu().solve(&rhs) else {
            continue;
        };
        let lhs = &cr * &y;
        if (0..k).all(|i| lhs[i] >= v[i] - tol(i)) {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> DVector<f64> {
        DVector::from_vec(v.to_vec())
    }

    #[test]
    fn combinations_count() {
        assert_eq!(Combinations::new(5, 2).count(), 10);
        assert_eq!(Combinations::new(4, 0).count(), 1);
        assert_eq!(Combinations::new(2, 3).count(), 0);
    }

    #[test]
    fn zero_c_gives_unit_vectors() {
        let h = enumerate_h(&DMatrix::zeros(3, 1)).unwrap();
        assert_eq!(
            h,
            vec![col(&[1., 0., 0.]), col(&[0., 1., 0.]), col(&[0., 0., 1.])]
        );
    }

    #[test]
    fn identity_c_is_empty() {
        assert!(enumerate_h(&DMatrix::identity(2, 2)).unwrap().is_empty());
    }

    #[test]
    fn opposite_rows_single_vertex() {
        let c = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let h = enumerate_h(&c).unwrap();
        assert_eq!(h.len(), 1);
        assert!((h[0][0] - 0.5).abs() < 1e-12 && (h[0][1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cap_is_enforced() {
        let c = DMatrix::zeros(16, 1);
        assert!(matches!(
            enumerate_h(&c),
            Err(Error::DimensionTooLarge { .. })
        ));
    }

    #[test]
    fn elimination_examples() {
        let r = eliminate_nuisance(
            &DMatrix::identity(3, 3),
            &DMatrix::zeros(3, 1),
            &col(&[1., 2., 3.]),
        )
        .unwrap();
        assert_eq!(r.a, DMatrix::identity(3, 3));
        assert_eq!(r.b, col(&[1., 2., 3.]));

        let r = eliminate_nuisance(
            &DMatrix::from_row_slice(2, 2, &[1., 4., -2., 3.]),
            &DMatrix::identity(2, 2),
            &col(&[5., 6.]),
        )
        .unwrap();
        assert_eq!(r.a.nrows(), 0);
        assert_eq!(r.b.len(), 0);

        let c = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        let r = eliminate_nuisance(&DMatrix::identity(2, 2), &c, &col(&[0., 0.])).unwrap();
        assert_eq!(r.a.nrows(), 1);
        assert!((r.a[(0, 0)] - 0.5).abs() < 1e-12 && (r.a[(0, 1)] - 0.5).abs() < 1e-12);
        assert_eq!(r.b[0], 0.0);
    }

    #[test]
    fn feasibility_examples() {
        let b = DMatrix::identity(2, 2);
        let d = col(&[0., 0.]);
        let c0 = DMatrix::zeros(2, 1);
        assert!(nuisance_feasible(&b, &c0, &d, &col(&[-1., -1.])).unwrap());
        assert!(!nuisance_feasible(&b, &c0, &d, &col(&[1., 0.])).unwrap());
        let c = DMatrix::from_column_slice(2, 1, &[1.0, -1.0]);
        assert!(nuisance_feasible(&b, &c, &d, &col(&[1., -2.])).unwrap());
        // delta >= 1 and -delta >= 2 cannot both hold
        assert!(!nuisance_feasible(&b, &c, &d, &col(&[1., 2.])).unwrap());
    }
}
