//! Confidence sets by inverting the test over a grid of parameter values.

use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::qp::QpProblem;
use crate::rcc::{rcc_test, RccResult};
use crate::stats::{canonical_order, SpdMatrix};
use crate::two_stage::{
    corrected_covariance_from, jacobian_p_delta, moments_at, FirstStageEstimate, MomentModel,
};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AxisSpec {
    Range { min: f64, max: f64, count: usize },
    Fixed { value: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAxis", into = "RawAxis")]
pub struct GridAxis {
    pub label: String,
    pub spec: AxisSpec,
}

/// Wire form of an axis: either `{label, min, max, count}` or `{label, value}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAxis {
    label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<f64>,
}

impl TryFrom<RawAxis> for GridAxis {
    type Error = String;

    fn try_from(raw: RawAxis) -> std::result::Result<Self, String> {
        let spec = match (raw.min, raw.max, raw.count, raw.value) {
            (Some(min), Some(max), Some(count), None) => AxisSpec::Range { min, max, count },
            (None, None, None, Some(value)) => AxisSpec::Fixed { value },
            _ => {
                return Err(format!(
                    "axis {}: give either min, max and count, or value",
                    raw.label
                ))
            }
        };
        Ok(GridAxis {
            label: raw.label,
            spec,
        })
    }
}

impl From<GridAxis> for RawAxis {
    fn from(a: GridAxis) -> Self {
        let mut raw = RawAxis {
            label: a.label,
            min: None,
            max: None,
            count: None,
            value: None,
        };
        match a.spec {
            AxisSpec::Range { min, max, count } => {
                raw.min = Some(min);
                raw.max = Some(max);
                raw.count = Some(count);
            }
            AxisSpec::Fixed { value } => raw.value = Some(value),
        }
        raw
    }
}

impl GridAxis {
    pub fn values(&self) -> Vec<f64> {
        match self.spec {
            AxisSpec::Fixed { value } => vec![value],
            AxisSpec::Range { min, count: 1, .. } => vec![min],
            AxisSpec::Range { min, max, count } => (0..count)
                .map(|i| {
                    if i + 1 == count {
                        max
                    } else {
                        min + (max - min) * i as f64 / (count - 1) as f64
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
}

impl GridSpec {
    pub fn validate(&self, dim_theta: usize) -> Result<()> {
        if self.axes.len() != dim_theta {
            return Err(Error::config(
                "grid.axes",
                format!("expected {dim_theta} axes, found {}", self.axes.len()),
            ));
        }
        for axis in &self.axes {
            let field = format!("grid.{}", axis.label);
            match axis.spec {
                AxisSpec::Fixed { value } if !value.is_finite() => {
                    return Err(Error::config(field, "value must be finite"));
                }
                AxisSpec::Range { min, max, count } => {
                    if count == 0 {
                        return Err(Error::config(field, "count must be at least 1"));
                    }
                    if !(min.is_finite() && max.is_finite() && min <= max) {
                        return Err(Error::config(field, "need finite min <= max"));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.values().len()).product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All grid points in row-major order: the last axis varies fastest.
    pub fn points(&self) -> Vec<Vec<f64>> {
        let values: Vec<Vec<f64>> = self.axes.iter().map(GridAxis::values).collect();
        let mut out = vec![Vec::new()];
        for vals in &values {
            let mut next = Vec::with_capacity(out.len() * vals.len());
            for prefix in &out {
                for v in vals {
                    let mut p = prefix.clone();
                    p.push(*v);
                    next.push(p);
                }
            }
            out = next;
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PointOutcome {
    Decided(RccResult),
    /// The point could not be evaluated; it is not part of the accepted set.
    Undecided {
        error: String,
    },
    /// The sweep was interrupted before this point was reached.
    NotEvaluated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub theta: Vec<f64>,
    pub outcome: PointOutcome,
}

impl GridPoint {
    pub fn accepted(&self) -> bool {
        matches!(&self.outcome, PointOutcome::Decided(r) if !r.reject)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GridMetadata {
    pub tool_version: String,
    pub seed: Option<u64>,
    pub dataset_id: String,
    pub delta_fingerprint: String,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceGrid {
    pub schema: u32,
    pub alpha: f64,
    pub labels: Vec<String>,
    pub axes: Vec<Vec<f64>>,
    pub points: Vec<GridPoint>,
    pub accepted: usize,
    pub undecided: usize,
    pub truncated: bool,
    pub metadata: GridMetadata,
}

impl ConfidenceGrid {
    pub fn accepted_points(&self) -> impl Iterator<Item = &GridPoint> {
        self.points.iter().filter(|p| p.accepted())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        let mut w = w;
        serde_json::to_writer_pretty(&mut w, self)
            .map_err(|e| Error::io("grid json", std::io::Error::other(e)))?;
        writeln!(w).map_err(|e| Error::io("grid json", e))?;
        Ok(())
    }
}

/// SHA-256 over the bit patterns of `delta_hat` and every influence value.
pub fn delta_fingerprint(first: &FirstStageEstimate) -> String {
    let mut h = Sha256::new();
    for v in first.delta_hat.iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    for psi in &first.influence {
        for v in psi.iter() {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InvertOptions {
    /// Finite-difference step for the Jacobian; `None` uses the default rule.
    pub jacobian_step: Option<f64>,
    pub sequential: bool,
}

/// Sample mean and corrected covariance of the moments at one `theta`.
#[derive(Clone, Debug)]
pub struct MomentSummary {
    pub pbar: DVector<f64>,
    pub sigma: SpdMatrix,
    pub ridge: f64,
    pub n: usize,
}

pub fn moment_summary<M: MomentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    first: &FirstStageEstimate,
    step: Option<f64>,
) -> Result<MomentSummary> {
    let moments = moments_at(model, theta, &first.delta_hat)?;
    let influence = (0..model.n_obs())
        .map(|i| model.observation_influence(i, first))
        .collect::<Result<Vec<_>>>()?;
    let p = jacobian_p_delta(model, theta, &first.delta_hat, step)?;
    let cov = corrected_covariance_from(&moments, &influence, &p)?;
    let n = moments.len();
    let mut pbar = DVector::zeros(model.moment_dim());
    for i in canonical_order(&moments) {
        pbar += &moments[i];
    }
    Ok(MomentSummary {
        pbar: pbar / n as f64,
        sigma: cov.sigma,
        ridge: cov.ridge,
        n,
    })
}

/// Runs the test at one parameter value.
pub fn test_point<M: MomentModel + ?Sized>(
    model: &M,
    theta: &[f64],
    summary: &MomentSummary,
    alpha: f64,
) -> Result<RccResult> {
    let cons = model.constraints(theta)?;
    let problem = QpProblem::new(
        summary.pbar.clone(),
        summary.sigma.clone(),
        cons.a(),
        cons.rho,
        summary.n,
    )?;
    Ok(rcc_test(&problem, alpha)?.1)
}

/// Evaluates the test at every grid point. Per-point failures are recorded
/// as undecided; setting `cancel` stops the sweep and marks it truncated.
pub fn invert_test<M: MomentModel + ?Sized>(
    grid: &GridSpec,
    model: &M,
    first: &FirstStageEstimate,
    alpha: f64,
    opts: &InvertOptions,
    cancel: Option<&AtomicBool>,
) -> Result<ConfidenceGrid> {
    grid.validate(model.dim_theta())?;
    if !first.converged {
        return Err(Error::config("first_stage", "first stage did not converge"));
    }
    if !(alpha > 0.0 && alpha <= 0.5) {
        return Err(Error::InvalidAlpha(alpha));
    }
    let points = grid.points();
    let shared = if model.moments_depend_on_theta() {
        None
    } else {
        Some(moment_summary(
            model,
            &points[0],
            first,
            opts.jacobian_step,
        )?)
    };

    let eval = |theta: &Vec<f64>| -> PointOutcome {
        if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
            return PointOutcome::NotEvaluated;
        }
        let result = match &shared {
            Some(s) => test_point(model, theta, s, alpha),
            None => moment_summary(model, theta, first, opts.jacobian_step)
                .and_then(|s| test_point(model, theta, &s, alpha)),
        };
        match result {
            Ok(r) => PointOutcome::Decided(r),
            Err(e) => PointOutcome::Undecided {
                error: e.to_string(),
            },
        }
    };
    let outcomes: Vec<PointOutcome> = if opts.sequential {
        points.iter().map(eval).collect()
    } else {
        points.par_iter().map(eval).collect()
    };

    let points: Vec<GridPoint> = points
        .into_iter()
        .zip(outcomes)
        .map(|(theta, outcome)| GridPoint { theta, outcome })
        .collect();
    let accepted = points.iter().filter(|p| p.accepted()).count();
    let undecided = points
        .iter()
        .filter(|p| matches!(p.outcome, PointOutcome::Undecided { .. }))
        .count();
    let truncated = points
        .iter()
        .any(|p| matches!(p.outcome, PointOutcome::NotEvaluated));
    Ok(ConfidenceGrid {
        schema: SCHEMA_VERSION,
        alpha,
        labels: grid.axes.iter().map(|a| a.label.clone()).collect(),
        axes: grid.axes.iter().map(GridAxis::values).collect(),
        points,
        accepted,
        undecided,
        truncated,
        metadata: GridMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            delta_fingerprint: delta_fingerprint(first),
            ..GridMetadata::default()
        },
    })
}

fn on_axis(axis: &[f64], value: f64) -> bool {
    axis.iter()
        .any(|&v| (v - value).abs() <= 1e-12 * (1.0 + v.abs()))
}

/// Writes the two-dimensional slice obtained by fixing every other
/// dimension. `fixed` lists `(label, value)` pairs; exactly two labels must
/// remain free. Rows follow the grid's row-major order.
pub fn export_slices<W: Write>(
    grid: &ConfidenceGrid,
    fixed: &[(String, f64)],
    w: W,
) -> Result<usize> {
    let mut fix: Vec<Option<f64>> = vec![None; grid.labels.len()];
    for (label, value) in fixed {
        let d = grid
            .labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::config("slice", format!("unknown dimension {label}")))?;
        if !on_axis(&grid.axes[d], *value) {
            return Err(Error::SliceNotOnGrid {
                dim: label.clone(),
                value: *value,
            });
        }
        fix[d] = Some(*value);
    }
    let free: Vec<usize> = (0..fix.len()).filter(|&d| fix[d].is_none()).collect();
    if free.len() != 2 {
        return Err(Error::config(
            "slice",
            format!("exactly two free dimensions required, found {}", free.len()),
        ));
    }

    let mut out = csv::Writer::from_writer(w);
    let to_io = |e: csv::Error| Error::io("slice csv", std::io::Error::other(e));
    out.write_record([
        grid.labels[free[0]].as_str(),
        grid.labels[free[1]].as_str(),
        "accepted",
        "T",
        "r_hat",
        "beta",
        "critical",
    ])
    .map_err(to_io)?;
    let mut rows = 0;
    for p in &grid.points {
        let matches = fix.iter().enumerate().all(|(d, f)| match f {
            Some(v) => (p.theta[d] - v).abs() <= 1e-12 * (1.0 + v.abs()),
            None => true,
        });
        if !matches {
            continue;
        }
        let mut rec = vec![
            format!("{:?}", p.theta[free[0]]),
            format!("{:?}", p.theta[free[1]]),
            if p.accepted() { "1" } else { "0" }.to_string(),
        ];
        match &p.outcome {
            PointOutcome::Decided(r) => rec.extend([
                format!("{:?}", r.statistic),
                r.r_hat.to_string(),
                format!("{:?}", r.beta),
                format!("{:?}", r.critical),
            ]),
            _ => rec.extend(std::iter::repeat_n(String::new(), 4)),
        }
        out.write_record(&rec).map_err(to_io)?;
        rows += 1;
    }
    out.flush().map_err(|e| Error::io("slice csv", e))?;
    Ok(rows)
}
