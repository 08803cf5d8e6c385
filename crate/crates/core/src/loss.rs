//! Error-squares and percentage-error-squares losses, regularized
//! objectives, and analytic gradients.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::model::{FeatureConfig, ParamGroup, ParameterSet};
use crate::schema::Observation;

/// Training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `1/2 sum (forecast - actual)^2`
    Es,
    /// `1/2 sum ((forecast - actual) / actual)^2`
    Pes,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Es => "es",
            LossKind::Pes => "pes",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = EfmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "es" => Ok(LossKind::Es),
            "pes" => Ok(LossKind::Pes),
            other => Err(EfmError::Config(format!("unknown loss {other:?}, expected es or pes"))),
        }
    }
}

/// How the model score maps to a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    /// `exp(score)`: the exponential factorization machine.
    #[default]
    Exp,
    /// `score`: a plain factorization machine, used on log responses.
    Identity,
}

impl Link {
    pub fn name(self) -> &'static str {
        match self {
            Link::Exp => "exp",
            Link::Identity => "identity",
        }
    }
}

/// Group-wise L2 penalties. The bias is never penalized.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RegularizerTable {
    /// Penalty on attribute effects.
    pub lambda_v: f64,
    /// Penalty on interaction factor entries.
    pub lambda_w: f64,
}

impl RegularizerTable {
    pub fn none() -> Self {
        RegularizerTable::default()
    }

    pub fn new(lambda_v: f64, lambda_w: f64) -> Result<Self> {
        if !(lambda_v >= 0.0 && lambda_w >= 0.0) {
            return Err(EfmError::Config(format!(
                "regularizers must be non-negative, got lambda_v = {lambda_v}, lambda_w = {lambda_w}"
            )));
        }
        Ok(RegularizerTable { lambda_v, lambda_w })
    }

    pub fn lambda(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Bias => 0.0,
            ParamGroup::Beta => self.lambda_v,
            ParamGroup::Mu => self.lambda_w,
        }
    }

    /// `1/2 sum lambda theta^2` over all parameters.
    pub fn penalty(&self, params: &ParameterSet) -> f64 {
        let v = params.values();
        let sq = |r: std::ops::Range<usize>| v[r].iter().map(|x| x * x).sum::<f64>();
        0.5 * (self.lambda_v * sq(params.beta_range()) + self.lambda_w * sq(params.mu_range()))
    }
}

fn check_pairs(kind: LossKind, forecasts: &[f64], actuals: &[f64]) -> Result<()> {
    if forecasts.len() != actuals.len() {
        return Err(EfmError::LengthMismatch {
            expected: actuals.len(),
            got: forecasts.len(),
        });
    }
    if actuals.is_empty() {
        return Err(EfmError::EmptyInput("no forecast/actual pairs".into()));
    }
    if kind == LossKind::Pes {
        if let Some((index, &value)) = actuals.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
            return Err(EfmError::NonPositiveActual { index, value });
        }
    }
    Ok(())
}

/// Squared error of one pair without the 1/2 factor.
pub fn term(kind: LossKind, forecast: f64, actual: f64) -> f64 {
    match kind {
        LossKind::Es => (forecast - actual).powi(2),
        LossKind::Pes => ((forecast - actual) / actual).powi(2),
    }
}

pub fn loss(kind: LossKind, forecasts: &[f64], actuals: &[f64]) -> Result<f64> {
    check_pairs(kind, forecasts, actuals)?;
    Ok(0.5 * forecasts.iter().zip(actuals).map(|(&f, &d)| term(kind, f, d)).sum::<f64>())
}

pub fn regularized_objective(loss_value: f64, params: &ParameterSet, reg: &RegularizerTable) -> f64 {
    loss_value + reg.penalty(params)
}

/// Derivative of one sample's loss with respect to the model score.
pub fn score_weight(kind: LossKind, link: Link, forecast: f64, actual: f64) -> f64 {
    let residual = match link {
        Link::Exp => (forecast - actual) * forecast,
        Link::Identity => forecast - actual,
    };
    match kind {
        LossKind::Es => residual,
        LossKind::Pes => residual / (actual * actual),
    }
}

/// Per-sample step factor shared by every parameter update.
pub fn common_term(kind: LossKind, eta: f64, forecast: f64, actual: f64) -> f64 {
    eta * score_weight(kind, Link::Exp, forecast, actual)
}

/// Mean absolute error (ES) or mean absolute percentage error (PES), as a fraction.
pub fn training_error(kind: LossKind, forecasts: &[f64], actuals: &[f64]) -> Result<f64> {
    check_pairs(kind, forecasts, actuals)?;
    Ok(mean_abs_error(kind, forecasts, actuals))
}

pub(crate) fn mean_abs_error(kind: LossKind, forecasts: &[f64], actuals: &[f64]) -> f64 {
    let n = actuals.len() as f64;
    let total: f64 = forecasts
        .iter()
        .zip(actuals)
        .map(|(&f, &d)| match kind {
            LossKind::Es => (f - d).abs(),
            LossKind::Pes => ((f - d) / d).abs(),
        })
        .sum();
    total / n
}

/// Predictions for every row.
pub fn predict_rows(
    params: &ParameterSet,
    features: &FeatureConfig,
    rows: &[Observation],
    link: Link,
) -> Result<Vec<f64>> {
    rows.par_iter()
        .map(|obs| {
            let s = params.score(features, obs)?;
            Ok(match link {
                Link::Exp => crate::model::forecast_from_score(s),
                Link::Identity => s,
            })
        })
        .collect()
}

/// Gradient of the unregularized loss against arbitrary targets, given the
/// current predictions.
pub(crate) fn loss_gradient_with_predictions(
    kind: LossKind,
    link: Link,
    params: &ParameterSet,
    features: &FeatureConfig,
    rows: &[Observation],
    predictions: &[f64],
    targets: &[f64],
) -> Result<Vec<f64>> {
    let mut grad = vec![0.0; params.len()];
    for ((obs, &p), &y) in rows.iter().zip(predictions).zip(targets) {
        let w = score_weight(kind, link, p, y);
        if w != 0.0 {
            params.accumulate_score_gradient(features, obs, w, &mut grad)?;
        }
    }
    Ok(grad)
}

/// Gradient of the unregularized EFM loss over `rows`, in the flat order of
/// [`ParameterSet::ids`].
pub fn gradient(
    kind: LossKind,
    params: &ParameterSet,
    features: &FeatureConfig,
    rows: &[Observation],
) -> Result<Vec<f64>> {
    if rows.is_empty() {
        return Err(EfmError::EmptyInput("gradient over no rows".into()));
    }
    let predictions = predict_rows(params, features, rows, Link::Exp)?;
    let targets: Vec<f64> = rows.iter().map(|r| r.response).collect();
    loss_gradient_with_predictions(kind, Link::Exp, params, features, rows, &predictions, &targets)
}

/// Unregularized EFM loss of `params` over `rows`.
pub fn dataset_loss(
    kind: LossKind,
    params: &ParameterSet,
    features: &FeatureConfig,
    rows: &[Observation],
) -> Result<f64> {
    let predictions = predict_rows(params, features, rows, Link::Exp)?;
    let targets: Vec<f64> = rows.iter().map(|r| r.response).collect();
    loss(kind, &predictions, &targets)
}
