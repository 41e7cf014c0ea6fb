//! Random-coefficients logit demand: simulated shares, mean-utility
//! inversion, the GMM objective and its quasi-Newton minimisation.
//!
//! Utility of consumer `r` for product `j` is `zeta_j + shift_{rj} + eps`,
//! with `zeta_j = x_j' beta - alpha p_j + xi_j`. A positive `alpha` means a
//! higher price lowers utility.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::SpdMatrix;
use crate::two_stage::{influence_from_scores, FirstStageEstimate};

/// GVWR, cab-over, compact-front, long-cab.
pub const N_CHARACTERISTICS: usize = 4;
/// `(beta_1..beta_4, alpha)`.
pub const N_DEMAND_PARAMS: usize = N_CHARACTERISTICS + 1;

const FIXED_COLUMNS: [&str; 12] = [
    "market",
    "period",
    "firm",
    "product",
    "gvwr",
    "cab_over",
    "compact_front",
    "long_cab",
    "price",
    "mc",
    "quantity",
    "market_size",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandRow {
    pub market: u32,
    pub period: u32,
    pub firm: u32,
    pub product: u32,
    pub x: [f64; N_CHARACTERISTICS],
    pub price: f64,
    pub mc: f64,
    pub quantity: f64,
    pub market_size: f64,
    pub instruments: Vec<f64>,
}

impl DemandRow {
    pub fn share(&self) -> f64 {
        self.quantity / self.market_size
    }
}

/// Product-level observations grouped into (market, period) cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DemandData {
    pub rows: Vec<DemandRow>,
    pub n_instruments: usize,
}

impl DemandData {
    pub fn new(rows: Vec<DemandRow>) -> Result<Self> {
        let n_instruments = rows.first().map_or(0, |r| r.instruments.len());
        let data = Self {
            rows,
            n_instruments,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Row indices per `(period, market)`, in ascending key order.
    pub fn markets(&self) -> BTreeMap<(u32, u32), Vec<usize>> {
        let mut map: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            map.entry((r.period, r.market)).or_default().push(i);
        }
        map
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::EmptyData);
        }
        for (i, r) in self.rows.iter().enumerate() {
            if r.instruments.len() != self.n_instruments {
                return Err(Error::RaggedRows {
                    row: i,
                    expected: self.n_instruments,
                    found: r.instruments.len(),
                });
            }
            let finite = r.x.iter().chain(&r.instruments).all(|v| v.is_finite())
                && r.price.is_finite()
                && r.mc.is_finite();
            if !finite {
                return Err(Error::Schema(format!("row {i}: non-finite value")));
            }
            if r.price < 0.0 {
                return Err(Error::Schema(format!("row {i}: negative price")));
            }
            if !(r.market_size > 0.0) {
                return Err(Error::Schema(format!(
                    "row {i}: market_size must be positive"
                )));
            }
            let s = r.share();
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::Schema(format!("row {i}: share {s} outside (0, 1)")));
            }
        }
        for ((period, market), idx) in self.markets() {
            let total: f64 = idx.iter().map(|&i| self.rows[i].share()).sum();
            if !(total < 1.0) {
                return Err(Error::Schema(format!(
                    "market {market} period {period}: inside shares sum to {total}"
                )));
            }
            let size = self.rows[idx[0]].market_size;
            if idx.iter().any(|&i| self.rows[i].market_size != size) {
                return Err(Error::Schema(format!(
                    "market {market} period {period}: inconsistent market_size"
                )));
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Schema(format!("demand header: {e}")))?
            .clone();
        let names: Vec<&str> = header.iter().collect();
        if names.len() < FIXED_COLUMNS.len() || names[..FIXED_COLUMNS.len()] != FIXED_COLUMNS {
            return Err(Error::Schema(format!(
                "demand header must start with {}",
                FIXED_COLUMNS.join(",")
            )));
        }
        let m = names.len() - FIXED_COLUMNS.len();
        for (k, name) in names[FIXED_COLUMNS.len()..].iter().enumerate() {
            if *name != format!("instrument_{}", k + 1) {
                return Err(Error::Schema(format!(
                    "expected column instrument_{} , found {name}",
                    k + 1
                )));
            }
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Schema(format!("demand row {}: {e}", line + 1)))?;
            let int = |c: usize| -> Result<u32> {
                rec[c].parse().map_err(|_| {
                    Error::Schema(format!(
                        "row {}: column {} is not an integer",
                        line + 1,
                        names[c]
                    ))
                })
            };
            let real = |c: usize| -> Result<f64> {
                rec[c].parse().map_err(|_| {
                    Error::Schema(format!(
                        "row {}: column {} is not a number",
                        line + 1,
                        names[c]
                    ))
                })
            };
            rows.push(DemandRow {
                market: int(0)?,
                period: int(1)?,
                firm: int(2)?,
                product: int(3)?,
                x: [real(4)?, real(5)?, real(6)?, real(7)?],
                price: real(8)?,
                mc: real(9)?,
                quantity: real(10)?,
                market_size: real(11)?,
                instruments: (0..m).map(|k| real(12 + k)).collect::<Result<_>>()?,
            });
        }
        let data = Self {
            rows,
            n_instruments: m,
        };
        data.validate()?;
        Ok(data)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((1..=self.n_instruments).map(|k| format!("instrument_{k}")));
        let to_io = |e: csv::Error| Error::io("demand csv", std::io::Error::other(e));
        w.write_record(&header).map_err(to_io)?;
        for r in &self.rows {
            let mut rec = vec![
                r.market.to_string(),
                r.period.to_string(),
                r.firm.to_string(),
                r.product.to_string(),
            ];
            rec.extend(r.x.iter().map(|v| format_real(*v)));
            rec.extend(
                [r.price, r.mc, r.quantity, r.market_size]
                    .iter()
                    .map(|v| format_real(*v)),
            );
            rec.extend(r.instruments.iter().map(|v| format_real(*v)));
            w.write_record(&rec).map_err(to_io)?;
        }
        w.flush().map_err(|e| Error::io("demand csv", e))?;
        Ok(())
    }

    pub fn read_path(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

/// Shortest representation that parses back to the same value.
pub(crate) fn format_real(v: f64) -> String {
    format!("{v:?}")
}

/// Coefficient heterogeneity draws shared by every market (common random numbers).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draws {
    pub seed: u64,
    /// Standard deviations for `(beta_1..beta_4, alpha)`.
    pub sigma: [f64; N_DEMAND_PARAMS],
    /// Standard normal draws, one row per simulated consumer.
    pub nu: Vec<[f64; N_DEMAND_PARAMS]>,
}

impl Draws {
    pub fn new(r: usize, sigma: [f64; N_DEMAND_PARAMS], seed: u64) -> Result<Self> {
        if r == 0 {
            return Err(Error::config("draws", "R must be at least 1"));
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::config(
                "sigma",
                "standard deviations must be finite and >= 0",
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nu = (0..r)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
            .collect();
        Ok(Self { seed, sigma, nu })
    }

    /// One draw with no heterogeneity: plain logit.
    pub fn logit() -> Self {
        Self {
            seed: 0,
            sigma: [0.0; N_DEMAND_PARAMS],
            nu: vec![[0.0; N_DEMAND_PARAMS]],
        }
    }

    pub fn count(&self) -> usize {
        self.nu.len()
    }

    /// Utility shift of each draw for one product.
    pub fn product_shift(&self, x: &[f64; N_CHARACTERISTICS], price: f64) -> Vec<f64> {
        self.nu
            .iter()
            .map(|nu| {
                let mut s = 0.0;
                for k in 0..N_CHARACTERISTICS {
                    s += self.sigma[k] * nu[k] * x[k];
                }
                s - self.sigma[N_CHARACTERISTICS] * nu[N_CHARACTERISTICS] * price
            })
            .collect()
    }

    /// `R x J` matrix of shifts for the listed products.
    pub fn shifts(&self, products: &[([f64; N_CHARACTERISTICS], f64)]) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.count(), products.len());
        for (j, (x, p)) in products.iter().enumerate() {
            for (r, v) in self.product_shift(x, *p).into_iter().enumerate() {
                m[(r, j)] = v;
            }
        }
        m
    }
}

/// Simulated inside shares, averaged over the rows of `shifts` (`R x J`).
pub fn simulate_shares(zeta: &DVector<f64>, shifts: &DMatrix<f64>) -> Result<DVector<f64>> {
    let j = zeta.len();
    if shifts.ncols() != j {
        return Err(Error::shape("shifts columns", j, shifts.ncols()));
    }
    if shifts.nrows() == 0 {
        return Err(Error::config("draws", "R must be at least 1"));
    }
    let r_count = shifts.nrows();
    let mut shares = DVector::<f64>::zeros(j);
    let mut u = vec![0.0; j];
    for r in 0..r_count {
        // the outside good has utility 0
        let mut top = 0.0_f64;
        for k in 0..j {
            u[k] = zeta[k] + shifts[(r, k)];
            if !u[k].is_finite() {
                return Err(Error::NonFiniteUtility { product: k });
            }
            top = top.max(u[k]);
        }
        let mut denom = (-top).exp();
        for v in u.iter_mut() {
            *v = (*v - top).exp();
            denom += *v;
        }
        for k in 0..j {
            shares[k] += u[k] / denom;
        }
    }
    Ok(shares / r_count as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContractionOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ContractionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    pub zeta: DVector<f64>,
    pub iterations: usize,
    /// Final `max_j |ln s_hat_j - ln s_j(zeta)|`.
    pub residual: f64,
}

/// Consecutive residual increases tolerated before the contraction is
/// declared divergent.
const DIVERGENCE_WINDOW: usize = 50;

/// Mean utilities matching the observed shares, by the fixed point
/// `zeta <- zeta + ln s_hat - ln s(zeta)` started at `ln s_hat`.
pub fn invert_shares(
    observed: &DVector<f64>,
    shifts: &DMatrix<f64>,
    opts: &ContractionOptions,
) -> Result<Inversion> {
    for &s in observed.iter() {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::InvalidProbability(s));
        }
    }
    if !(observed.sum() < 1.0) {
        return Err(Error::Schema(format!(
            "inside shares sum to {}",
            observed.sum()
        )));
    }
    let log_obs = observed.map(f64::ln);
    let mut zeta = log_obs.clone();
    let mut residual = f64::INFINITY;
    let mut growing = 0;
    for it in 0..=opts.max_iter {
        let gap = &log_obs - simulate_shares(&zeta, shifts)?.map(f64::ln);
        let next = gap.amax();
        if !next.is_finite() {
            return Err(Error::NoConvergence {
                iterations: it,
                residual: next,
            });
        }
        if next <= opts.tol {
            return Ok(Inversion {
                zeta,
                iterations: it,
                residual: next,
            });
        }
        growing = if next > residual { growing + 1 } else { 0 };
        residual = next;
        if growing >= DIVERGENCE_WINDOW || it == opts.max_iter {
            return Err(Error::NoConvergence {
                iterations: it,
                residual,
            });
        }
        zeta += gap;
    }
    unreachable!("loop returns on its last iteration")
}

/// Stacked estimation sample after share inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct DemandSample {
    pub zeta: DVector<f64>,
    /// `n x 4` characteristics.
    pub x: DMatrix<f64>,
    pub price: DVector<f64>,
    /// `n x m` instruments: the characteristics followed by the excluded instruments.
    pub z: DMatrix<f64>,
    pub max_iterations: usize,
    pub max_residual: f64,
}

impl DemandSample {
    pub fn len(&self) -> usize {
        self.zeta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.zeta.is_empty()
    }

    /// Inverts every market-period and stacks the result in row order.
    pub fn from_data(data: &DemandData, draws: &Draws, opts: &ContractionOptions) -> Result<Self> {
        data.validate()?;
        let markets: Vec<Vec<usize>> = data.markets().into_values().collect();
        let inverted = markets
            .par_iter()
            .map(|idx| {
                let observed =
                    DVector::from_iterator(idx.len(), idx.iter().map(|&i| data.rows[i].share()));
                let products: Vec<_> = idx
                    .iter()
                    .map(|&i| (data.rows[i].x, data.rows[i].price))
                    .collect();
                invert_shares(&observed, &draws.shifts(&products), opts)
            })
            .collect::<Result<Vec<_>>>()?;

        let n = data.len();
        let m = N_CHARACTERISTICS + data.n_instruments;
        let mut zeta = DVector::zeros(n);
        let mut x = DMatrix::zeros(n, N_CHARACTERISTICS);
        let mut z = DMatrix::zeros(n, m);
        let mut price = DVector::zeros(n);
        let mut max_iterations = 0;
        let mut max_residual = 0.0_f64;
        for (idx, inv) in markets.iter().zip(&inverted) {
            max_iterations = max_iterations.max(inv.iterations);
            max_residual = max_residual.max(inv.residual);
            for (pos, &i) in idx.iter().enumerate() {
                zeta[i] = inv.zeta[pos];
            }
        }
        for (i, r) in data.rows.iter().enumerate() {
            price[i] = r.price;
            for k in 0..N_CHARACTERISTICS {
                x[(i, k)] = r.x[k];
                z[(i, k)] = r.x[k];
            }
            for (k, v) in r.instruments.iter().enumerate() {
                z[(i, N_CHARACTERISTICS + k)] = *v;
            }
        }
        Ok(Self {
            zeta,
            x,
            price,
            z,
            max_iterations,
            max_residual,
        })
    }

    /// Structural residuals `xi = zeta - x beta + alpha p`.
    pub fn residuals(&self, delta: &DVector<f64>) -> Result<DVector<f64>> {
        check_delta(delta)?;
        let beta = delta.rows(0, N_CHARACTERISTICS);
        Ok(&self.zeta - &self.x * beta + &self.price * delta[N_CHARACTERISTICS])
    }

    fn residual_at(&self, i: usize, delta: &DVector<f64>) -> f64 {
        let mut xb = 0.0;
        for k in 0..N_CHARACTERISTICS {
            xb += self.x[(i, k)] * delta[k];
        }
        self.zeta[i] - xb + delta[N_CHARACTERISTICS] * self.price[i]
    }

    /// Per-observation score `z_i xi_i(delta)`.
    pub fn score(&self, i: usize, delta: &DVector<f64>) -> DVector<f64> {
        self.z.row(i).transpose() * self.residual_at(i, delta)
    }
}

fn check_delta(delta: &DVector<f64>) -> Result<()> {
    if delta.len() != N_DEMAND_PARAMS {
        return Err(Error::shape("delta", N_DEMAND_PARAMS, delta.len()));
    }
    Ok(())
}

/// `(Z'Z / n)^{-1}`.
pub fn default_weight(sample: &DemandSample) -> Result<DMatrix<f64>> {
    let n = sample.len() as f64;
    let mut zz = sample.z.transpose() * &sample.z / n;
    crate::stats::symmetrize(&mut zz);
    let spd = SpdMatrix::new(zz)?;
    let m = spd.dim();
    let mut inv = DMatrix::zeros(m, m);
    for k in 0..m {
        let mut e = DVector::zeros(m);
        e[k] = 1.0;
        inv.set_column(k, &spd.solve(&e));
    }
    crate::stats::symmetrize(&mut inv);
    Ok(inv)
}

/// `Q(delta) = xi' Z W Z' xi`.
pub fn gmm_objective(
    delta: &DVector<f64>,
    sample: &DemandSample,
    weight: &DMatrix<f64>,
) -> Result<f64> {
    let m = sample.z.ncols();
    if weight.nrows() != m || weight.ncols() != m {
        return Err(Error::shape("GMM weight", m, weight.nrows()));
    }
    let xi = sample.residuals(delta)?;
    let v = sample.z.transpose() * xi;
    Ok(v.dot(&(weight * &v)).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BfgsOptions {
    /// Stop when `max |grad| <= tol (1 + |Q|)`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BfgsOutcome {
    pub x: DVector<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Central-difference gradient with step `1e-6 (1 + |x_k|)`.
pub fn numerical_gradient<F>(f: &F, x: &DVector<f64>) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let mut g = DVector::zeros(x.len());
    for k in 0..x.len() {
        let h = 1e-6 * (1.0 + x[k].abs());
        let mut up = x.clone();
        up[k] += h;
        let mut down = x.clone();
        down[k] -= h;
        g[k] = (f(&up)? - f(&down)?) / (2.0 * h);
    }
    Ok(g)
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

/// BFGS on the inverse Hessian with numerical gradients and a backtracking
/// Armijo line search. Running out of iterations is reported through
/// `converged = false`, not as an error.
pub fn bfgs_minimize<F>(f: F, x0: &DVector<f64>, opts: &BfgsOptions) -> Result<BfgsOutcome>
where
    F: Fn(&DVector<f64>) -> Result<f64>,
{
    let n = x0.len();
    let mut x = x0.clone();
    let mut fx = f(&x)?;
    if !fx.is_finite() {
        return Err(Error::EvaluationFailure(
            "objective is not finite at the start".into(),
        ));
    }
    let mut g = numerical_gradient(&f, &x)?;
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut scaled = false;
    let mut iterations = 0;

    loop {
        let gnorm = g.amax();
        if gnorm <= opts.tol * (1.0 + fx.abs()) {
            return Ok(BfgsOutcome {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: true,
            });
        }
        if iterations >= opts.max_iter {
            return Ok(BfgsOutcome {
                x,
                value: fx,
                gradient_norm: gnorm,
                iterations,
                converged: false,
            });
        }

        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            h = DMatrix::identity(n, n);
            scaled = false;
            d = -g.clone();
            slope = g.dot(&d);
        }
        // before any curvature is known, take a unit-length first step
        let mut t = if scaled { 1.0 } else { 1.0 / d.amax() };
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let trial = &x + &d * t;
            let ft = f(&trial)?;
            if ft.is_finite() && ft <= fx + ARMIJO_C1 * t * slope {
                accepted = Some((trial, ft));
                break;
            }
            t *= 0.5;
        }
        let Some((x_new, f_new)) = accepted else {
            if scaled {
                h = DMatrix::identity(n, n);
                scaled = false;
                continue;
            }
            return Err(Error::LineSearchFailure { step: t });
        };

        let g_new = numerical_gradient(&f, &x_new)?;
        let s = &x_new - &x;
        let y = &g_new - &g;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() {
            if !scaled {
                h = DMatrix::identity(n, n) * (sy / y.dot(&y));
                scaled = true;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H+ = H - rho (H y s' + s y' H) + (rho^2 y'Hy + rho) s s'
            h -= (&hy * s.transpose() + &s * hy.transpose()) * rho;
            h += (&s * s.transpose()) * (rho * rho * yhy + rho);
        }
        x = x_new;
        fx = f_new;
        g = g_new;
        iterations += 1;
    }
}

/// Minimises the GMM objective and attaches influence values. `weight =
/// None` uses [`default_weight`].
pub fn estimate_demand(
    sample: &DemandSample,
    weight: Option<&DMatrix<f64>>,
    init: &DVector<f64>,
    opts: &BfgsOptions,
) -> Result<FirstStageEstimate> {
    check_delta(init)?;
    if sample.is_empty() {
        return Err(Error::EmptyData);
    }
    if init.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("init", "starting values must be finite"));
    }
    let w = match weight {
        Some(w) => w.clone(),
        None => default_weight(sample)?,
    };
    let outcome = bfgs_minimize(|d| gmm_objective(d, sample, &w), init, opts)?;
    let (influence, g_matrix) = gmm_influence(sample, &outcome.x, &w)?;
    Ok(FirstStageEstimate {
        delta_hat: outcome.x,
        influence,
        g_matrix,
        converged: outcome.converged,
        objective_value: outcome.value,
        iterations: outcome.iterations,
        gradient_norm: outcome.gradient_norm,
    })
}

/// Influence values of the GMM estimator for the score `z_i xi_i(delta)`.
pub fn gmm_influence(
    sample: &DemandSample,
    delta_hat: &DVector<f64>,
    weight: &DMatrix<f64>,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    check_delta(delta_hat)?;
    influence_from_scores(sample.len(), delta_hat, Some(weight), |i, d| {
        sample.score(i, d)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn no_shift(j: usize) -> DMatrix<f64> {
        DMatrix::zeros(1, j)
    }

    #[test]
    fn logistic_at_zero() {
        let s = simulate_shares(&DVector::from_vec(vec![0.0]), &no_shift(1)).unwrap();
        assert_eq!(s[0], 0.5);
    }

    #[test]
    fn symmetric_products_share_equally() {
        let s = simulate_shares(&DVector::from_vec(vec![0.7, 0.7]), &no_shift(2)).unwrap();
        assert_eq!(s[0], s[1]);
    }

    #[test]
    fn hand_logit() {
        let s = simulate_shares(&DVector::from_vec(vec![1.0, 2.0]), &no_shift(2)).unwrap();
        let e1 = 1f64.exp();
        let e2 = 2f64.exp();
        assert_abs_diff_eq!(s[0], e1 / (1.0 + e1 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(s[1], e2 / (1.0 + e1 + e2), epsilon = 1e-15);
        assert_abs_diff_eq!(s[0], 0.2447, epsilon = 1e-4);
        assert_abs_diff_eq!(s[1], 0.6652, epsilon = 1e-4);
        let s = simulate_shares(&DVector::from_vec(vec![0.0, 1.0]), &no_shift(2)).unwrap();
        assert_abs_diff_eq!(s[0], 0.2119, epsilon = 1e-4);
        assert_abs_diff_eq!(s[1], 0.5761, epsilon = 1e-4);
    }

    #[test]
    fn extreme_utilities_do_not_overflow() {
        let s = simulate_shares(&DVector::from_vec(vec![700.0, -700.0]), &no_shift(2)).unwrap();
        assert!(s.iter().all(|v| v.is_finite() && *v >= 0.0 && *v <= 1.0));
        assert!(s[0] > 0.99);
        let s = simulate_shares(&DVector::from_vec(vec![f64::NAN]), &no_shift(1));
        assert!(matches!(s, Err(Error::NonFiniteUtility { product: 0 })));
    }

    #[test]
    fn single_product_half_share_inverts_to_zero() {
        let inv = invert_shares(
            &DVector::from_vec(vec![0.5]),
            &no_shift(1),
            &ContractionOptions::default(),
        )
        .unwrap();
        assert_abs_diff_eq!(inv.zeta[0], 0.0, epsilon = 1e-11);
    }

    #[test]
    fn divergent_or_capped_contraction_reports() {
        let opts = ContractionOptions {
            tol: 1e-12,
            max_iter: 2,
        };
        let res = invert_shares(&DVector::from_vec(vec![0.45, 0.45]), &no_shift(2), &opts);
        assert!(matches!(res, Err(Error::NoConvergence { .. })));
    }

    #[test]
    fn rejects_invalid_shares() {
        let opts = ContractionOptions::default();
        assert!(invert_shares(&DVector::from_vec(vec![0.0]), &no_shift(1), &opts).is_err());
        assert!(invert_shares(&DVector::from_vec(vec![0.6, 0.5]), &no_shift(2), &opts).is_err());
    }

    #[test]
    fn draws_are_reproducible() {
        let a = Draws::new(20, [0.5, 0.0, 0.1, 0.0, 0.2], 9).unwrap();
        let b = Draws::new(20, [0.5, 0.0, 0.1, 0.0, 0.2], 9).unwrap();
        assert_eq!(a, b);
        let c = Draws::new(20, [0.5, 0.0, 0.1, 0.0, 0.2], 10).unwrap();
        assert_ne!(a.nu, c.nu);
        assert!(Draws::new(0, [0.0; 5], 1).is_err());
    }

    fn tiny_sample() -> DemandSample {
        DemandSample {
            zeta: DVector::from_vec(vec![0.3, -1.1, 0.8]),
            x: DMatrix::from_row_slice(
                3,
                4,
                &[1.0, 0.0, 1.0, 0.0, 2.0, 1.0, 0.0, 0.0, 0.5, 0.0, 0.0, 1.0],
            ),
            price: DVector::from_vec(vec![1.5, 2.0, 0.7]),
            z: DMatrix::from_row_slice(3, 1, &[1.0, -2.0, 0.5]),
            max_iterations: 0,
            max_residual: 0.0,
        }
    }

    #[test]
    fn single_instrument_objective_is_squared_moment() {
        let s = tiny_sample();
        let delta = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.5]);
        let xi = s.residuals(&delta).unwrap();
        let zxi: f64 = (0..3).map(|i| s.z[(i, 0)] * xi[i]).sum();
        let q = gmm_objective(&delta, &s, &DMatrix::identity(1, 1)).unwrap();
        assert_abs_diff_eq!(q, zxi * zxi, epsilon = 1e-14);
    }

    #[test]
    fn exact_fit_objective_is_zero() {
        let mut s = tiny_sample();
        let delta = DVector::from_vec(vec![0.1, 0.2, -0.3, 0.4, 0.5]);
        s.zeta = &s.x * delta.rows(0, 4) - &s.price * 0.5;
        let q = gmm_objective(&delta, &s, &DMatrix::identity(1, 1)).unwrap();
        assert_abs_diff_eq!(q, 0.0, epsilon = 1e-28);
        assert!(gmm_objective(&delta, &s, &DMatrix::identity(2, 2)).is_err());
    }

    #[test]
    fn bfgs_on_rosenbrock() {
        let f = |v: &DVector<f64>| Ok((1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2));
        let out = bfgs_minimize(
            f,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &BfgsOptions {
                tol: 1e-7,
                max_iter: 1000,
            },
        )
        .unwrap();
        assert!(out.converged, "{out:?}");
        assert_abs_diff_eq!(out.x[0], 1.0, epsilon = 1e-5);
        assert_abs_diff_eq!(out.x[1], 1.0, epsilon = 1e-5);
    }

    #[test]
    fn bfgs_iteration_cap() {
        let f = |v: &DVector<f64>| Ok((1.0 - v[0]).powi(2) + 100.0 * (v[1] - v[0] * v[0]).powi(2));
        let out = bfgs_minimize(
            f,
            &DVector::from_vec(vec![-1.2, 1.0]),
            &BfgsOptions {
                tol: 1e-9,
                max_iter: 1,
            },
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 1);
    }

    #[test]
    fn csv_header_is_checked() {
        let bad = "market,period,firm,product,gvwr,cab_over,compact_front,long_cab,price,mc,qty,market_size\n";
        assert!(matches!(
            DemandData::read_csv(bad.as_bytes()),
            Err(Error::Schema(_))
        ));
        let bad = "market,period,firm,product,gvwr,cab_over,compact_front,long_cab,price,mc,quantity,market_size,instrument_2\n";
        assert!(matches!(
            DemandData::read_csv(bad.as_bytes()),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            DemandRow {
                market: 1,
                period: 0,
                firm: 2,
                product: 7,
                x: [1.25, 0.0, 1.0, 0.0],
                price: 3.1,
                mc: 2.0,
                quantity: 120.0,
                market_size: 1000.0,
                instruments: vec![0.1 + 0.2],
            },
            DemandRow {
                market: 1,
                period: 0,
                firm: 3,
                product: 2,
                x: [0.75, 1.0, 0.0, 1.0],
                price: 2.2,
                mc: 1.4,
                quantity: 300.0,
                market_size: 1000.0,
                instruments: vec![-0.4],
            },
        ];
        let data = DemandData::new(rows).unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let back = DemandData::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn shares_must_leave_outside_good() {
        let row = |q: f64| DemandRow {
            market: 0,
            period: 0,
            firm: 0,
            product: 0,
            x: [1.0, 0.0, 0.0, 0.0],
            price: 1.0,
            mc: 0.5,
            quantity: q,
            market_size: 10.0,
            instruments: vec![],
        };
        let mut second = row(5.0);
        second.product = 1;
        assert!(matches!(
            DemandData::new(vec![row(5.0), second]),
            Err(Error::Schema(_))
        ));
    }
}
