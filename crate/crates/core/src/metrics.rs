//! Forecast evaluation, training diagnostics, the response distribution
//! report, and an exhaustive check of the ES/PES minimizer bounds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::loss::{self, LossKind};
use crate::model::{FeatureConfig, ParameterSet};
use crate::schema::{Dataset, RowKey};

/// Test-set accuracy at row level and after summing rows per item.
/// Percentage errors are fractions (0.05 means 5%).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub mape_store: f64,
    pub mae_store: f64,
    pub mape_chain: f64,
    pub mae_chain: f64,
    pub n_rows: usize,
    pub n_items: usize,
}

impl EvaluationReport {
    pub const CSV_HEADER: &'static str = "mape_store,mae_store,mape_chain,mae_chain,n_rows,n_items";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.mape_store, self.mae_store, self.mape_chain, self.mae_chain, self.n_rows, self.n_items
        )
    }
}

/// Scores forecasts against actuals. Both maps must have the same keys.
pub fn evaluate(forecasts: &BTreeMap<RowKey, f64>, actuals: &BTreeMap<RowKey, f64>) -> Result<EvaluationReport> {
    if actuals.is_empty() {
        return Err(EfmError::EmptyInput("nothing to evaluate".into()));
    }
    if forecasts.len() != actuals.len() || forecasts.keys().zip(actuals.keys()).any(|(a, b)| a != b) {
        let missing = actuals.keys().find(|k| !forecasts.contains_key(k));
        let extra = forecasts.keys().find(|k| !actuals.contains_key(k));
        return Err(EfmError::KeyMismatch(match (missing, extra) {
            (Some(k), _) => format!("no forecast for {k}"),
            (_, Some(k)) => format!("no actual for {k}"),
            _ => "key sets differ".into(),
        }));
    }
    let mut chain: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    let (mut ape, mut ae) = (0.0, 0.0);
    for (index, ((key, &f), &d)) in forecasts.iter().zip(actuals.values()).enumerate() {
        if !(d > 0.0) {
            return Err(EfmError::NonPositiveActual { index, value: d });
        }
        ape += ((f - d) / d).abs();
        ae += (f - d).abs();
        let entry = chain.entry(key.item.as_str()).or_insert((0.0, 0.0));
        entry.0 += f;
        entry.1 += d;
    }
    let n = actuals.len() as f64;
    let (mut chain_ape, mut chain_ae) = (0.0, 0.0);
    for (item, &(f, d)) in &chain {
        if d == 0.0 {
            return Err(EfmError::KeyMismatch(format!("item {item} has zero total actual")));
        }
        chain_ape += ((f - d) / d).abs();
        chain_ae += (f - d).abs();
    }
    let m = chain.len() as f64;
    Ok(EvaluationReport {
        mape_store: ape / n,
        mae_store: ae / n,
        mape_chain: chain_ape / m,
        mae_chain: chain_ae / m,
        n_rows: actuals.len(),
        n_items: chain.len(),
    })
}

/// Fit-quality measurements on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingDiagnostics {
    /// Mean squared error.
    pub mes: f64,
    /// Mean squared percentage error.
    pub mpes: f64,
    /// Fraction of rows fitted strictly below their actual.
    pub underestimation_ratio: f64,
    /// Squared ratio of the largest to the smallest actual.
    pub ratio_indicator: f64,
}

pub fn diagnostics(fitted: &[f64], actuals: &[f64]) -> Result<TrainingDiagnostics> {
    if fitted.len() != actuals.len() {
        return Err(EfmError::LengthMismatch {
            expected: actuals.len(),
            got: fitted.len(),
        });
    }
    if actuals.is_empty() {
        return Err(EfmError::EmptyInput("no fitted values".into()));
    }
    if let Some((index, &value)) = actuals.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(EfmError::NonPositiveActual { index, value });
    }
    let n = actuals.len() as f64;
    let pairs = || fitted.iter().zip(actuals);
    Ok(TrainingDiagnostics {
        mes: pairs().map(|(f, d)| (f - d).powi(2)).sum::<f64>() / n,
        mpes: pairs().map(|(f, d)| ((f - d) / d).powi(2)).sum::<f64>() / n,
        underestimation_ratio: pairs().filter(|(f, d)| f < d).count() as f64 / n,
        ratio_indicator: ratio_indicator(actuals),
    })
}

/// `max(d)^2 / min(d)^2`.
pub fn ratio_indicator(actuals: &[f64]) -> f64 {
    let max = actuals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = actuals.iter().copied().fold(f64::INFINITY, f64::min);
    (max / min).powi(2)
}

/// Fractions of values in the quarters of `[0, max]`: `[.., 0.25 max)`,
/// `[0.25 max, 0.5 max)`, `[0.5 max, 0.75 max)`, `[0.75 max, max]`.
pub fn response_distribution(values: &[f64]) -> Result<[f64; 4]> {
    if values.is_empty() {
        return Err(EfmError::EmptyInput("no responses".into()));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let edges = [0.25 * max, 0.5 * max, 0.75 * max];
    let mut counts = [0usize; 4];
    for &v in values {
        counts[edges.iter().position(|&e| v < e).unwrap_or(3)] += 1;
    }
    let n = values.len() as f64;
    Ok(counts.map(|c| c as f64 / n))
}

/// Losses at both minimizers and whether the ordering bounds hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub es_at_es: f64,
    pub es_at_pes: f64,
    pub pes_at_pes: f64,
    pub pes_at_es: f64,
    pub ratio_indicator: f64,
    /// `es_at_pes / es_at_es`
    pub es_ratio: f64,
    /// `pes_at_es / pes_at_pes`
    pub pes_ratio: f64,
    pub es_bounds_hold: bool,
    pub pes_bounds_hold: bool,
}

/// Minimizes `objective` over a box by repeatedly refining a uniform grid
/// around the best point. Returns the minimizer.
pub fn grid_minimize(
    objective: impl Fn(&[f64]) -> f64,
    center: &[f64],
    half_width: f64,
    points_per_axis: usize,
    tolerance: f64,
) -> Result<Vec<f64>> {
    let dims = center.len();
    if dims == 0 {
        return Ok(Vec::new());
    }
    if dims > 3 {
        return Err(EfmError::GridNonConvergence(format!(
            "grid search supports at most 3 free parameters, got {dims}"
        )));
    }
    let points = points_per_axis.max(3) | 1;
    let mut center = center.to_vec();
    let mut width = half_width;
    let mut best_value = objective(&center);
    let mut rounds = 0;
    while width > tolerance {
        rounds += 1;
        if rounds > 200 {
            return Err(EfmError::GridNonConvergence("too many refinement rounds".into()));
        }
        let step = 2.0 * width / (points - 1) as f64;
        let total = points.pow(dims as u32);
        let mut best = center.clone();
        let mut point = vec![0.0; dims];
        for index in 0..total {
            let mut rest = index;
            for (axis, p) in point.iter_mut().enumerate() {
                *p = center[axis] - width + step * (rest % points) as f64;
                rest /= points;
            }
            let value = objective(&point);
            if value < best_value {
                best_value = value;
                best.clone_from(&point);
            }
        }
        if !best_value.is_finite() {
            return Err(EfmError::GridNonConvergence("objective is not finite on the grid".into()));
        }
        center = best;
        width = 2.0 * step;
    }
    Ok(center)
}

/// Computes ES and PES minimizers of an EFM with at most three parameters
/// by grid refinement and checks
/// `L_ES(es*) <= L_ES(pes*) <= r L_ES(es*)` and
/// `L_PES(pes*) <= L_PES(es*) <= r L_PES(pes*)` with `r = max(d)^2/min(d)^2`.
/// `tolerance` is the relative slack allowed on each inequality.
pub fn verify_minimizer_bounds(data: &Dataset, features: &FeatureConfig, tolerance: f64) -> Result<BoundReport> {
    data.require_non_empty()?;
    if !features.interactions().is_empty() {
        return Err(EfmError::GridNonConvergence(
            "bound check supports attribute effects only".into(),
        ));
    }
    let template = ParameterSet::zeros(data.schema(), features, 1)?;
    let actuals = data.responses();
    // the score is linear in the parameters, so each row's score is a sum
    // over the parameters it activates
    let active = data
        .rows()
        .iter()
        .map(|obs| {
            let mut grad = vec![0.0; template.len()];
            template.accumulate_score_gradient(features, obs, 1.0, &mut grad)?;
            Ok((0..grad.len()).filter(|&i| grad[i] != 0.0).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let evaluate = |kind: LossKind, theta: &[f64]| -> f64 {
        0.5 * active
            .iter()
            .zip(&actuals)
            .map(|(idx, &d)| {
                let f = crate::model::forecast_from_score(idx.iter().map(|&i| theta[i]).sum());
                loss::term(kind, f, d)
            })
            .sum::<f64>()
    };
    let mut center = vec![0.0; template.len()];
    center[0] = (actuals.iter().sum::<f64>() / actuals.len() as f64).ln();
    let es_star = grid_minimize(|t| evaluate(LossKind::Es, t), &center, 8.0, 21, 1e-9)?;
    let pes_star = grid_minimize(|t| evaluate(LossKind::Pes, t), &center, 8.0, 21, 1e-9)?;

    let es_at_es = evaluate(LossKind::Es, &es_star);
    let es_at_pes = evaluate(LossKind::Es, &pes_star);
    let pes_at_pes = evaluate(LossKind::Pes, &pes_star);
    let pes_at_es = evaluate(LossKind::Pes, &es_star);
    let r = ratio_indicator(&actuals);
    let le = |a: f64, b: f64| a <= b + tolerance * b.abs().max(1e-12);
    Ok(BoundReport {
        es_at_es,
        es_at_pes,
        pes_at_pes,
        pes_at_es,
        ratio_indicator: r,
        es_ratio: es_at_pes / es_at_es,
        pes_ratio: pes_at_es / pes_at_pes,
        es_bounds_hold: le(es_at_es, es_at_pes) && le(es_at_pes, r * es_at_es),
        pes_bounds_hold: le(pes_at_pes, pes_at_es) && le(pes_at_es, r * pes_at_pes),
    })
}
