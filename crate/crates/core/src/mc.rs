//! Monte Carlo size and coverage studies.

use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confset::{moment_summary, test_point};
use crate::error::{Error, Result};
use crate::market::{synth_dgp, SunkCostTheta, SynthConfig};
use crate::pipeline::{build_market_model, run_first_stage, FirstStageOptions};
use crate::qp::QpProblem;
use crate::rcc::rcc_test;
use crate::stats::SpdMatrix;

/// Relation between `A mu` and `rho` declared by a design.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Relation {
    Boundary,
    Interior,
    Violated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeStudyDesign {
    /// Row-major `k x d` matrix.
    pub a: Vec<Vec<f64>>,
    pub rho: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub mu: Vec<f64>,
    pub relation: Relation,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    100
}

fn default_reps() -> usize {
    10_000
}

fn default_alpha() -> f64 {
    0.05
}

fn matrix(rows: &[Vec<f64>], what: &'static str) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 {
        return Err(Error::config(what, "must be a nonempty matrix"));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != c {
            return Err(Error::RaggedRows {
                row: i,
                expected: c,
                found: row.len(),
            });
        }
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

impl SizeStudyDesign {
    pub fn from_parts(
        a: &DMatrix<f64>,
        rho: &DVector<f64>,
        sigma: &DMatrix<f64>,
        mu: &DVector<f64>,
        relation: Relation,
    ) -> Self {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|i| m.row(i).iter().copied().collect())
                .collect()
        };
        Self {
            a: rows(a),
            rho: rho.iter().copied().collect(),
            sigma: rows(sigma),
            mu: mu.iter().copied().collect(),
            relation,
            n: default_n(),
            reps: default_reps(),
            alpha: default_alpha(),
            seed: 0,
        }
    }

    /// `(A, rho, Sigma, mu)`
    #[allow(clippy::type_complexity)]
    fn parts(&self) -> Result<(DMatrix<f64>, DVector<f64>, SpdMatrix, DVector<f64>)> {
        let a = matrix(&self.a, "a")?;
        let sigma = SpdMatrix::new(matrix(&self.sigma, "sigma")?)?;
        let rho = DVector::from_column_slice(&self.rho);
        let mu = DVector::from_column_slice(&self.mu);
        if rho.len() != a.nrows() {
            return Err(Error::shape("rho", a.nrows(), rho.len()));
        }
        if mu.len() != a.ncols() || sigma.dim() != a.ncols() {
            return Err(Error::shape("mu/sigma", a.ncols(), mu.len()));
        }
        Ok((a, rho, sigma, mu))
    }

    pub fn validate(&self) -> Result<()> {
        let (a, rho, _, mu) = self.parts()?;
        if a.iter().all(|v| *v == 0.0) {
            return Err(Error::config("a", "must not be the zero matrix"));
        }
        if self.n == 0 {
            return Err(Error::config("n", "must be positive"));
        }
        if self.reps == 0 {
            return Err(Error::config("reps", "must be positive"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        let gap = &a * &mu - &rho;
        let scale = 1e-12 * (1.0 + rho.amax());
        let ok = match self.relation {
            Relation::Boundary => gap.iter().all(|g| g.abs() <= scale),
            Relation::Interior => gap.iter().all(|g| *g <= scale),
            Relation::Violated => gap.iter().any(|g| *g > scale),
        };
        if !ok {
            return Err(Error::config(
                "relation",
                format!(
                    "A mu - rho = {:?} contradicts {:?}",
                    gap.as_slice(),
                    self.relation
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub rate: f64,
    /// Binomial standard error; `None` with fewer than two replications.
    pub se: Option<f64>,
    pub successes: usize,
    pub reps: usize,
    /// Replications that failed before a decision.
    pub failures: usize,
    /// Replications skipped after an interrupt.
    pub skipped: usize,
}

impl RateReport {
    fn new(successes: usize, decided: usize, failures: usize, skipped: usize) -> Self {
        let rate = if decided > 0 {
            successes as f64 / decided as f64
        } else {
            f64::NAN
        };
        let se = (decided >= 2).then(|| (rate * (1.0 - rate) / decided as f64).sqrt());
        Self {
            rate,
            se,
            successes,
            reps: decided,
            failures,
            skipped,
        }
    }
}

/// Independent generator for replication `rep`: the master seed keys the
/// generator and the replication index selects its stream.
pub fn rep_rng(master: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(rep);
    rng
}

enum RepOutcome {
    Hit,
    Miss,
    Failed,
    Skipped,
}

fn tally(outcomes: &[RepOutcome]) -> RateReport {
    let mut hits = 0;
    let mut decided = 0;
    let mut failed = 0;
    let mut skipped = 0;
    for o in outcomes {
        match o {
            RepOutcome::Hit => {
                hits += 1;
                decided += 1;
            }
            RepOutcome::Miss => decided += 1,
            RepOutcome::Failed => failed += 1,
            RepOutcome::Skipped => skipped += 1,
        }
    }
    RateReport::new(hits, decided, failed, skipped)
}

/// Rejection rate when `pbar ~ N(mu, Sigma / n)` and the test is handed the
/// true `Sigma`.
pub fn run_size_study(design: &SizeStudyDesign, cancel: Option<&AtomicBool>) -> Result<RateReport> {
    design.validate()?;
    let (a, rho, sigma, mu) = design.parts()?;
    let l = sigma.cholesky_lower().clone();
    let scale = 1.0 / (design.n as f64).sqrt();
    let outcomes: Vec<RepOutcome> = (0..design.reps as u64)
        .into_par_iter()
        .map(|rep| {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return RepOutcome::Skipped;
            }
            let mut rng = rep_rng(design.seed, rep);
            let z = DVector::from_fn(mu.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let pbar = &mu + &l * z * scale;
            let decision = QpProblem::new(pbar, sigma.clone(), a.clone(), rho.clone(), design.n)
                .and_then(|p| rcc_test(&p, design.alpha));
            match decision {
                Ok((_, r)) if r.reject => RepOutcome::Hit,
                Ok(_) => RepOutcome::Miss,
                Err(_) => RepOutcome::Failed,
            }
        })
        .collect();
    Ok(tally(&outcomes))
}

/// `A = I_2`, `Sigma = I`, `mu = 0`, `rho = 0`: every constraint binds.
pub fn boundary_design() -> SizeStudyDesign {
    SizeStudyDesign::from_parts(
        &DMatrix::identity(2, 2),
        &DVector::zeros(2),
        &DMatrix::identity(2, 2),
        &DVector::zeros(2),
        Relation::Boundary,
    )
}

/// Random designs in which `A mu <= rho` with at most one binding row and
/// the remaining rows slack by up to a few standard errors.
pub fn interior_designs(count: usize, seed: u64) -> Vec<SizeStudyDesign> {
    (0..count as u64)
        .map(|i| {
            let mut rng = rep_rng(seed, i);
            let d = 2 + (i as usize % 2);
            let k = d + 1 + (i as usize % 3);
            let n = 100;
            let a = DMatrix::from_fn(k, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let mut sigma = &g * g.transpose() + DMatrix::identity(d, d) * 0.5;
            crate::stats::symmetrize(&mut sigma);
            let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let spd = SpdMatrix::new(sigma.clone()).expect("G G' + I/2 is positive definite");
            let binding = if i == 0 {
                None
            } else {
                Some(rng.random_range(0..k))
            };
            let rho = DVector::from_fn(k, |j, _| {
                let aj = a.row(j).transpose();
                let se = spd.norm(&aj) / (n as f64).sqrt();
                let slack = if Some(j) == binding {
                    0.0
                } else {
                    se * rng.random_range(0.25..3.0)
                };
                aj.dot(&mu) + slack
            });
            let mut design = SizeStudyDesign::from_parts(&a, &rho, &sigma, &mu, Relation::Interior);
            design.seed = seed.wrapping_add(1000 + i);
            design
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageConfig {
    pub synth: SynthConfig,
    pub first_stage: FirstStageOptions,
    pub reps: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            first_stage: FirstStageOptions::default(),
            reps: 500,
            alpha: 0.05,
            seed: 0,
        }
    }
}

/// Acceptance decision at the true parameter for one simulated dataset.
pub fn coverage_rep(cfg: &CoverageConfig, data_seed: u64) -> Result<bool> {
    let ds = synth_dgp(&cfg.synth, data_seed)?;
    let (sample, first) = run_first_stage(&ds.demand, &ds.draws, &cfg.first_stage)?;
    if !first.converged {
        return Err(Error::NoConvergence {
            iterations: first.iterations,
            residual: first.gradient_norm,
        });
    }
    let model = build_market_model(&ds.demand, &sample, &ds.events, &ds.draws)?;
    let theta = SunkCostTheta {
        lambda: ds.truth.lambda,
        eta: ds.truth.eta,
    }
    .to_vec();
    let summary = moment_summary(&model, &theta, &first, None)?;
    Ok(!test_point(&model, &theta, &summary, cfg.alpha)?.reject)
}

/// Fraction of replications whose confidence set contains the truth.
pub fn run_coverage_study(cfg: &CoverageConfig, cancel: Option<&AtomicBool>) -> Result<RateReport> {
    cfg.synth.validate()?;
    if cfg.reps == 0 {
        return Err(Error::config("reps", "must be positive"));
    }
    if !(cfg.alpha > 0.0 && cfg.alpha <= 0.5) {
        return Err(Error::InvalidAlpha(cfg.alpha));
    }
    let outcomes: Vec<RepOutcome> = (0..cfg.reps as u64)
        .into_par_iter()
        .map(|rep| {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return RepOutcome::Skipped;
            }
            let data_seed = rep_rng(cfg.seed, rep).next_u64();
            match coverage_rep(cfg, data_seed) {
                Ok(true) => RepOutcome::Hit,
                Ok(false) => RepOutcome::Miss,
                Err(_) => RepOutcome::Failed,
            }
        })
        .collect();
    Ok(tally(&outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_reporting() {
        let r = RateReport::new(1, 1, 0, 0);
        assert_eq!(r.rate, 1.0);
        assert!(r.se.is_none());
        let r = RateReport::new(5, 100, 2, 0);
        assert!((r.se.unwrap() - (0.05f64 * 0.95 / 100.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn streams_differ_and_repeat() {
        let a = rep_rng(3, 0).next_u64();
        let b = rep_rng(3, 1).next_u64();
        assert_ne!(a, b);
        assert_eq!(a, rep_rng(3, 0).next_u64());
    }

    #[test]
    fn design_relation_is_checked() {
        let mut d = boundary_design();
        d.mu = vec![0.1, 0.0];
        assert!(d.validate().is_err());
        d.relation = Relation::Violated;
        assert!(d.validate().is_ok());
        let mut z = boundary_design();
        z.a = vec![vec![0.0, 0.0], vec![0.0, 0.0]];
        assert!(z.validate().is_err());
    }

    #[test]
    fn interior_designs_are_interior() {
        for d in interior_designs(5, 17) {
            d.validate().unwrap();
        }
    }

    #[test]
    fn violated_design_has_power() {
        let mut d = boundary_design();
        d.relation = Relation::Violated;
        // ten standard errors past the first constraint
        d.mu = vec![1.0, -5.0];
        d.reps = 400;
        let r = run_size_study(&d, None).unwrap();
        assert!(r.rate >= 0.99, "{r:?}");
    }

    #[test]
    fn far_interior_never_rejects() {
        let mut d = boundary_design();
        d.relation = Relation::Interior;
        d.mu = vec![-5.0, -5.0];
        d.reps = 400;
        let r = run_size_study(&d, None).unwrap();
        assert!(r.rate <= 0.005, "{r:?}");
    }

    #[test]
    fn rep_order_does_not_matter() {
        let mut d = boundary_design();
        d.reps = 300;
        let a = run_size_study(&d, None).unwrap();
        let b = run_size_study(&d, None).unwrap();
        assert_eq!(a, b);
    }
}
