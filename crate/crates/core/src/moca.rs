//! Per-layer scale-and-shift calibration of vision tokens, `ψ(f) = u ⊙ f + v`.
//!
//! Two desk-scale fitters work against a frozen activation dump: closed-form
//! per-dimension moment matching, and plain gradient descent on a
//! diagonal-moment loss.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gapstats::{self, PrepareOptions};
use crate::matsqrt::SqrtConfig;
use crate::metric::{fid_layer, MetricError};

/// Dimensions whose vision standard deviation falls below this get a pure shift.
pub const MIN_STD: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("need at least 2 tokens per modality, got {0}")]
    InsufficientSamples(usize),
    #[error("gradient descent diverged at step {step}: loss {loss:e} vs initial {initial:e}")]
    Divergence { step: usize, loss: f64, initial: f64 },
    #[error("calibration parameters for layer {0} contain a non-finite entry")]
    NonFinite(usize),
    #[error("malformed calibration file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Elementwise scale `u` and shift `v` for one layer's vision tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationParams {
    #[serde(rename = "layer")]
    pub layer_index: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl CalibrationParams {
    /// All-ones scale, all-zeros shift.
    pub fn identity(layer_index: usize, dim: usize) -> Self {
        Self {
            layer_index,
            u: vec![1.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        if self.u.len() != self.v.len() {
            return Err(CalibrationError::DimensionMismatch {
                expected: self.u.len(),
                found: self.v.len(),
            });
        }
        if self.u.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(CalibrationError::NonFinite(self.layer_index));
        }
        Ok(())
    }
}

/// Serializes one parameter record per layer as a JSON array.
pub fn params_to_json(params: &[CalibrationParams]) -> String {
    serde_json::to_string_pretty(params).expect("params serialize")
}

pub fn params_from_json(text: &str) -> Result<Vec<CalibrationParams>, CalibrationError> {
    let params: Vec<CalibrationParams> =
        serde_json::from_str(text).map_err(|e| CalibrationError::Malformed(e.to_string()))?;
    for p in &params {
        p.validate()?;
    }
    Ok(params)
}

/// Row-wise `u ⊙ x + v`. A zero shift is skipped, so the identity
/// parameters leave every bit of the input unchanged (including `-0.0`).
pub fn apply_calibration(tokens: &DMatrix<f64>, params: &CalibrationParams) -> Result<DMatrix<f64>, CalibrationError> {
    params.validate()?;
    if tokens.ncols() != params.dim() {
        return Err(CalibrationError::DimensionMismatch {
            expected: params.dim(),
            found: tokens.ncols(),
        });
    }
    let mut out = tokens.clone();
    for ((mut col, &u), &v) in out.column_iter_mut().zip(&params.u).zip(&params.v) {
        if u != 1.0 {
            col *= u;
        }
        if v != 0.0 {
            col.add_scalar_mut(v);
        }
    }
    Ok(out)
}

/// Per-column mean and unbiased variance.
fn column_moments(m: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = m.nrows() as f64;
    m.column_iter()
        .map(|c| {
            let mean = c.sum() / n;
            let var = c.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (mean, var)
        })
        .unzip()
}

fn check_pair(vision: &DMatrix<f64>, text: &DMatrix<f64>) -> Result<(), CalibrationError> {
    if vision.ncols() != text.ncols() {
        return Err(CalibrationError::DimensionMismatch {
            expected: text.ncols(),
            found: vision.ncols(),
        });
    }
    let n = vision.nrows().min(text.nrows());
    if n < 2 {
        return Err(CalibrationError::InsufficientSamples(n));
    }
    Ok(())
}

/// Closed form: `u_i = σt_i / σv_i`, `v_i = μt_i − u_i·μv_i`, so calibrated
/// vision tokens carry the text tokens' per-dimension mean and variance.
pub fn fit_moment_matching(
    vision: &DMatrix<f64>,
    text: &DMatrix<f64>,
    layer_index: usize,
) -> Result<CalibrationParams, CalibrationError> {
    check_pair(vision, text)?;
    let (mean_v, var_v) = column_moments(vision);
    let (mean_t, var_t) = column_moments(text);
    let mut params = CalibrationParams::identity(layer_index, vision.ncols());
    for i in 0..vision.ncols() {
        let (std_v, std_t) = (var_v[i].sqrt(), var_t[i].sqrt());
        let u = if std_v > MIN_STD { std_t / std_v } else { 1.0 };
        params.u[i] = u;
        params.v[i] = mean_t[i] - u * mean_v[i];
    }
    Ok(params)
}

/// `‖u⊙μv + v − μt‖² + ‖u²⊙σ²v − σ²t‖²`: squared error between the calibrated
/// vision moments and the text moments, per dimension.
#[derive(Debug, Clone)]
pub struct DiagonalMomentLoss {
    mean_v: Vec<f64>,
    var_v: Vec<f64>,
    mean_t: Vec<f64>,
    var_t: Vec<f64>,
}

impl DiagonalMomentLoss {
    pub fn new(vision: &DMatrix<f64>, text: &DMatrix<f64>) -> Result<Self, CalibrationError> {
        check_pair(vision, text)?;
        let (mean_v, var_v) = column_moments(vision);
        let (mean_t, var_t) = column_moments(text);
        Ok(Self {
            mean_v,
            var_v,
            mean_t,
            var_t,
        })
    }

    fn residuals(&self, p: &CalibrationParams, i: usize) -> (f64, f64) {
        let u = p.u[i];
        (u * self.mean_v[i] + p.v[i] - self.mean_t[i], u * u * self.var_v[i] - self.var_t[i])
    }

    pub fn loss(&self, p: &CalibrationParams) -> f64 {
        (0..self.mean_v.len())
            .map(|i| {
                let (rm, rv) = self.residuals(p, i);
                rm * rm + rv * rv
            })
            .sum()
    }

    /// `(∂L/∂u, ∂L/∂v)`.
    pub fn gradient(&self, p: &CalibrationParams) -> (Vec<f64>, Vec<f64>) {
        (0..self.mean_v.len())
            .map(|i| {
                let (rm, rv) = self.residuals(p, i);
                let du = 2.0 * rm * self.mean_v[i] + 4.0 * rv * p.u[i] * self.var_v[i];
                let dv = 2.0 * rm;
                (du, dv)
            })
            .unzip()
    }
}

#[derive(Debug, Clone)]
pub struct GradientFit {
    /// Lowest-loss parameters seen, never worse than the initialization.
    pub params: CalibrationParams,
    /// Loss before the first step and after every step.
    pub losses: Vec<f64>,
}

impl GradientFit {
    pub fn initial_loss(&self) -> f64 {
        self.losses[0]
    }

    pub fn best_loss(&self) -> f64 {
        self.losses.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Gradient descent on [`DiagonalMomentLoss`] from the identity parameters.
/// Fails with `Divergence` once the loss exceeds ten times its initial value.
pub fn fit_gradient(
    vision: &DMatrix<f64>,
    text: &DMatrix<f64>,
    layer_index: usize,
    steps: usize,
    learning_rate: f64,
) -> Result<GradientFit, CalibrationError> {
    let objective = DiagonalMomentLoss::new(vision, text)?;
    let mut params = CalibrationParams::identity(layer_index, vision.ncols());
    let initial = objective.loss(&params);
    let mut best = (initial, params.clone());
    let mut losses = Vec::with_capacity(steps + 1);
    losses.push(initial);

    for step in 1..=steps {
        let (du, dv) = objective.gradient(&params);
        for (u, g) in params.u.iter_mut().zip(&du) {
            *u -= learning_rate * g;
        }
        for (v, g) in params.v.iter_mut().zip(&dv) {
            *v -= learning_rate * g;
        }
        let loss = objective.loss(&params);
        if !loss.is_finite() || (loss > 10.0 * initial && loss > f64::MIN_POSITIVE) {
            return Err(CalibrationError::Divergence { step, loss, initial });
        }
        losses.push(loss);
        if loss < best.0 {
            best = (loss, params.clone());
        }
    }
    Ok(GradientFit { params: best.1, losses })
}

/// Layer distance before and after calibrating the vision tokens, under the
/// same preparation options.
pub fn calibration_gap_report(
    vision: &DMatrix<f64>,
    text: &DMatrix<f64>,
    params: &CalibrationParams,
    prepare: &PrepareOptions,
    cfg: &SqrtConfig,
) -> Result<(f64, f64), CalibrationError> {
    let distance = |v: DMatrix<f64>| -> Result<f64, CalibrationError> {
        let prepared = gapstats::prepare_matrices(v, text.clone(), prepare).map_err(MetricError::from)?;
        Ok(fid_layer(&prepared.vision, &prepared.text, cfg)?)
    };
    let before = distance(vision.clone())?;
    let after = distance(apply_calibration(vision, params)?)?;
    Ok((before, after))
}
