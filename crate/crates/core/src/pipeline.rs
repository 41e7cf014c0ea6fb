//! Glue from raw data to a testable moment model.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::demand::{
    estimate_demand, BfgsOptions, ContractionOptions, DemandData, DemandSample, Draws,
    N_DEMAND_PARAMS,
};
use crate::error::{Error, Result};
use crate::market::{MarketModel, VehicleEvent};
use crate::two_stage::FirstStageEstimate;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FirstStageOptions {
    pub contraction: ContractionOptions,
    pub bfgs: BfgsOptions,
    /// Starting value for `(beta, alpha)`; zeros when absent.
    pub init: Option<Vec<f64>>,
}

/// Share inversion followed by GMM estimation.
pub fn run_first_stage(
    data: &DemandData,
    draws: &Draws,
    opts: &FirstStageOptions,
) -> Result<(DemandSample, FirstStageEstimate)> {
    let sample = DemandSample::from_data(data, draws, &opts.contraction)?;
    let init = match &opts.init {
        Some(v) if v.len() == N_DEMAND_PARAMS => DVector::from_column_slice(v),
        Some(v) => return Err(Error::shape("init", N_DEMAND_PARAMS, v.len())),
        None => DVector::zeros(N_DEMAND_PARAMS),
    };
    let first = estimate_demand(&sample, None, &init, &opts.bfgs)?;
    Ok((sample, first))
}

pub fn build_market_model(
    data: &DemandData,
    sample: &DemandSample,
    events: &[VehicleEvent],
    draws: &Draws,
) -> Result<MarketModel> {
    MarketModel::new(data, &sample.zeta, events, draws)
}

/// Heterogeneity draws as configured in files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DrawsConfig {
    pub count: usize,
    pub sigma: [f64; N_DEMAND_PARAMS],
    pub seed: u64,
}

impl Default for DrawsConfig {
    fn default() -> Self {
        Self {
            count: 1,
            sigma: [0.0; N_DEMAND_PARAMS],
            seed: 7,
        }
    }
}

impl DrawsConfig {
    pub fn build(&self) -> Result<Draws> {
        Draws::new(self.count, self.sigma, self.seed)
    }
}

/// Serialised first-stage result, enough to rebuild the moment model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FirstStageFile {
    pub draws: DrawsConfig,
    pub contraction: ContractionOptions,
    pub converged: bool,
    pub objective_value: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub delta_hat: Vec<f64>,
    pub g_matrix: Vec<Vec<f64>>,
    pub influence: Vec<Vec<f64>>,
    pub fingerprint: String,
    pub max_inversion_residual: f64,
}

impl FirstStageFile {
    pub fn new(
        draws: DrawsConfig,
        contraction: ContractionOptions,
        sample: &DemandSample,
        first: &FirstStageEstimate,
    ) -> Self {
        Self {
            draws,
            contraction,
            converged: first.converged,
            objective_value: first.objective_value,
            iterations: first.iterations,
            gradient_norm: first.gradient_norm,
            delta_hat: first.delta_hat.iter().copied().collect(),
            g_matrix: (0..first.g_matrix.nrows())
                .map(|i| first.g_matrix.row(i).iter().copied().collect())
                .collect(),
            influence: first
                .influence
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect(),
            fingerprint: crate::confset::delta_fingerprint(first),
            max_inversion_residual: sample.max_residual,
        }
    }

    pub fn estimate(&self) -> Result<FirstStageEstimate> {
        let dim = self.delta_hat.len();
        if self.g_matrix.len() != dim || self.g_matrix.iter().any(|r| r.len() != dim) {
            return Err(Error::Schema(
                "g_matrix must be square with the size of delta_hat".into(),
            ));
        }
        if self.influence.iter().any(|r| r.len() != dim) {
            return Err(Error::Schema(
                "influence rows must have the size of delta_hat".into(),
            ));
        }
        let est = FirstStageEstimate {
            delta_hat: DVector::from_column_slice(&self.delta_hat),
            influence: self
                .influence
                .iter()
                .map(|r| DVector::from_column_slice(r))
                .collect(),
            g_matrix: nalgebra::DMatrix::from_fn(dim, dim, |i, j| self.g_matrix[i][j]),
            converged: self.converged,
            objective_value: self.objective_value,
            iterations: self.iterations,
            gradient_norm: self.gradient_norm,
        };
        if crate::confset::delta_fingerprint(&est) != self.fingerprint {
            return Err(Error::Schema(
                "first-stage fingerprint does not match its contents".into(),
            ));
        }
        Ok(est)
    }
}
