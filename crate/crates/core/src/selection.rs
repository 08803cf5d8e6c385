//! Greedy forward stepwise feature selection.
//!
//! The search alternates between adding attributes and adding interactions.
//! Candidates are ranked by a closed-form loss that refits one multiplicative
//! factor per level cell on top of the current fitted values; the best
//! augmentation is accepted only if its cross-validation errors are
//! significantly smaller than the incumbent's under a one-sided paired t-test.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::abgd::{self, TrainConfig};
use crate::error::{EfmError, Result};
use crate::loss::{self, Link, LossKind, RegularizerTable};
use crate::model::FeatureConfig;
use crate::schema::{Dataset, Interaction, KFoldPartition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// Attributes added per attribute step.
    pub b: usize,
    /// Interactions added per interaction step.
    pub g: usize,
    /// Penalty per attribute level.
    #[serde(rename = "lambda_A")]
    pub lambda_a: f64,
    /// Penalty per interaction level pair.
    #[serde(rename = "lambda_I")]
    pub lambda_i: f64,
    pub k: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Seed of the fold partition.
    #[serde(default)]
    pub partition_seed: u64,
}

fn default_alpha() -> f64 {
    0.05
}

impl SelectionConfig {
    pub fn new(b: usize, g: usize, lambda_a: f64, lambda_i: f64) -> Self {
        SelectionConfig {
            b,
            g,
            lambda_a,
            lambda_i,
            k: 5,
            alpha: default_alpha(),
            partition_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EfmError::Config(msg));
        if self.b == 0 || self.g == 0 {
            return bad("selection depths b and g must be at least 1".into());
        }
        if !(self.lambda_a >= 0.0 && self.lambda_i >= 0.0) {
            return bad("selection penalties must be non-negative".into());
        }
        if self.k < 2 {
            return bad(format!("k must be at least 2, got {}", self.k));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha must lie in (0, 1), got {}", self.alpha));
        }
        Ok(())
    }
}

/// Which kind of feature a search step adds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchDirection {
    Attributes,
    Interactions,
}

impl SearchDirection {
    pub fn value(self) -> i8 {
        match self {
            SearchDirection::Attributes => 1,
            SearchDirection::Interactions => -1,
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            SearchDirection::Attributes => SearchDirection::Interactions,
            SearchDirection::Interactions => SearchDirection::Attributes,
        }
    }
}

/// Per-fold validation errors: MAE under ES, MAPE (fraction) under PES.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub errors: Vec<f64>,
}

impl CvResult {
    pub fn mean(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.errors.len() as f64
    }
}

/// Intercept minimizing the loss of a constant forecast.
pub fn null_model_beta0(kind: LossKind, responses: &[f64]) -> Result<f64> {
    Ok(null_level(kind, responses)?.ln())
}

/// The constant forecast minimizing the loss: the mean under ES and
/// `sum(1/d) / sum(1/d^2)` under PES.
pub fn null_level(kind: LossKind, responses: &[f64]) -> Result<f64> {
    if responses.is_empty() {
        return Err(EfmError::EmptyInput("null model needs at least one response".into()));
    }
    if let Some((index, &value)) = responses.iter().enumerate().find(|(_, &d)| !(d > 0.0)) {
        return Err(EfmError::NonPositiveActual { index, value });
    }
    Ok(match kind {
        LossKind::Es => responses.iter().sum::<f64>() / responses.len() as f64,
        LossKind::Pes => {
            let inv: f64 = responses.iter().map(|d| 1.0 / d).sum();
            let inv_sq: f64 = responses.iter().map(|d| 1.0 / (d * d)).sum();
            inv / inv_sq
        }
    })
}

/// Validation errors of the null model fitted on each fold's complement.
pub fn null_model_cv_errors(kind: LossKind, partition: &KFoldPartition, data: &Dataset) -> Result<CvResult> {
    partition.check_covers(data)?;
    let responses = data.responses();
    let mut errors = Vec::with_capacity(partition.k());
    for fold in 0..partition.k() {
        let held = partition.fold_indices(fold);
        if held.is_empty() {
            return Err(EfmError::Partition(format!("fold {} is empty", fold + 1)));
        }
        let rest: Vec<f64> = partition.complement_indices(fold).iter().map(|&i| responses[i]).collect();
        let level = null_level(kind, &rest)?;
        let actual: Vec<f64> = held.iter().map(|&i| responses[i]).collect();
        let forecast = vec![level; actual.len()];
        errors.push(loss::training_error(kind, &forecast, &actual)?);
    }
    Ok(CvResult { errors })
}

/// Residual of the best per-cell multiplicative refit. Rows with the same
/// `cells[i]` share one factor; empty cells contribute nothing.
fn cell_refit_residual(kind: LossKind, cells: &[usize], n_cells: usize, fitted: &[f64], actual: &[f64]) -> f64 {
    let mut num = vec![0.0; n_cells];
    let mut den = vec![0.0; n_cells];
    for ((&cell, &f), &d) in cells.iter().zip(fitted).zip(actual) {
        match kind {
            LossKind::Es => {
                num[cell] += d * f;
                den[cell] += f * f;
            }
            LossKind::Pes => {
                let r = f / d;
                num[cell] += r;
                den[cell] += r * r;
            }
        }
    }
    let weight: Vec<f64> = num.iter().zip(&den).map(|(n, d)| if *d > 0.0 { n / d } else { 0.0 }).collect();
    cells
        .iter()
        .zip(fitted)
        .zip(actual)
        .map(|((&cell, &f), &d)| match kind {
            LossKind::Es => (f * weight[cell] - d).powi(2),
            LossKind::Pes => (f / d * weight[cell] - 1.0).powi(2),
        })
        .sum()
}

fn check_fitted(data: &Dataset, fitted: &[f64]) -> Result<()> {
    if fitted.len() != data.len() {
        return Err(EfmError::LengthMismatch {
            expected: data.len(),
            got: fitted.len(),
        });
    }
    Ok(())
}

/// Minimal refit loss of adding attribute `c`, plus `lambda_a` per level.
/// `fitted` holds the current fitted value of each row of `data`, in order.
pub fn fas_score(c: usize, fitted: &[f64], data: &Dataset, kind: LossKind, lambda_a: f64) -> Result<f64> {
    check_fitted(data, fitted)?;
    let cells: Vec<usize> = data.rows().iter().map(|r| r.level(c)).collect();
    let levels = data.schema().num_levels(c);
    let residual = cell_refit_residual(kind, &cells, levels, fitted, &data.responses());
    Ok(residual + lambda_a * levels as f64)
}

/// Minimal refit loss of adding interaction `pair`, plus `lambda_i` per
/// joint level.
pub fn fis_score(pair: Interaction, fitted: &[f64], data: &Dataset, kind: LossKind, lambda_i: f64) -> Result<f64> {
    check_fitted(data, fitted)?;
    let (a, b) = (pair.first(), pair.second());
    let la = data.schema().num_levels(a);
    let lb = data.schema().num_levels(b);
    let cells: Vec<usize> = data.rows().iter().map(|r| r.level(a) * lb + r.level(b)).collect();
    let residual = cell_refit_residual(kind, &cells, la * lb, fitted, &data.responses());
    Ok(residual + lambda_i * (la * lb) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FssOutcome {
    pub attributes: Vec<usize>,
    pub interactions: Vec<Interaction>,
    /// Every scored candidate in ranking order.
    pub ranking: Vec<CandidateScore>,
}

impl FssOutcome {
    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty() && self.interactions.is_empty()
    }
}

fn unregularized(train: &TrainConfig) -> TrainConfig {
    train.clone().with_reg(RegularizerTable::none())
}

/// One forward subset selection step in `direction` from `current`.
pub fn fss(
    direction: SearchDirection,
    current: &FeatureConfig,
    data: &Dataset,
    kind: LossKind,
    cfg: &SelectionConfig,
    train: &TrainConfig,
) -> Result<FssOutcome> {
    let schema = data.schema();
    let attribute_pool: Vec<usize> = (0..schema.len()).filter(|&c| !current.has_attribute(c)).collect();
    let interaction_pool: Vec<Interaction> = schema
        .interaction_universe()
        .into_iter()
        .filter(|p| !current.has_interaction(p))
        .filter(|p| !current.interactions().iter().any(|q| q.shares_attribute(p)))
        .collect();
    let pool_empty = match direction {
        SearchDirection::Attributes => attribute_pool.is_empty(),
        SearchDirection::Interactions => interaction_pool.is_empty(),
    };
    if pool_empty {
        return Ok(FssOutcome::default());
    }

    let report = abgd::train(data, current, kind, &unregularized(train))?;
    let fitted = loss::predict_rows(&report.final_params, current, data.rows(), Link::Exp)?;

    let mut outcome = FssOutcome::default();
    match direction {
        SearchDirection::Attributes => {
            let scores = attribute_pool
                .par_iter()
                .map(|&c| Ok((c, fas_score(c, &fitted, data, kind, cfg.lambda_a)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut ranked = scores;
            // stable sort keeps schema order among ties
            ranked.sort_by(|x, y| x.1.total_cmp(&y.1));
            outcome.attributes = ranked.iter().take(cfg.b).map(|(c, _)| *c).collect();
            outcome.ranking = ranked
                .iter()
                .map(|&(c, score)| CandidateScore {
                    name: schema.attribute(c).name.clone(),
                    score,
                })
                .collect();
        }
        SearchDirection::Interactions => {
            let scores = interaction_pool
                .par_iter()
                .map(|&p| Ok((p, fis_score(p, &fitted, data, kind, cfg.lambda_i)?)))
                .collect::<Result<Vec<_>>>()?;
            let mut ranked = scores;
            ranked.sort_by(|x, y| x.1.total_cmp(&y.1));
            for &(p, _) in &ranked {
                if outcome.interactions.len() == cfg.g {
                    break;
                }
                if !outcome.interactions.iter().any(|q| q.shares_attribute(&p)) {
                    outcome.interactions.push(p);
                }
            }
            outcome.ranking = ranked
                .iter()
                .map(|&(p, score)| CandidateScore {
                    name: format!("{}:{}", schema.attribute(p.first()).name, schema.attribute(p.second()).name),
                    score,
                })
                .collect();
        }
    }
    Ok(outcome)
}

/// Trains on every fold's complement and scores the held-out fold.
pub fn cross_validate(
    features: &FeatureConfig,
    partition: &KFoldPartition,
    data: &Dataset,
    kind: LossKind,
    train: &TrainConfig,
) -> Result<CvResult> {
    partition.check_covers(data)?;
    let errors = (0..partition.k())
        .into_par_iter()
        .map(|fold| {
            let held = data.subset(&partition.fold_indices(fold));
            if held.is_empty() {
                return Err(EfmError::Partition(format!("fold {} is empty", fold + 1)));
            }
            let fit = data.subset(&partition.complement_indices(fold));
            let report = abgd::train(&fit, features, kind, train)?;
            let forecasts = loss::predict_rows(&report.final_params, features, held.rows(), Link::Exp)?;
            loss::training_error(kind, &forecasts, &held.responses())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CvResult { errors })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestOutcome {
    /// Mean difference over its standard error; infinite when the
    /// differences have zero variance and a nonzero mean.
    pub t_statistic: f64,
    pub critical_value: f64,
    pub significant: bool,
}

/// One-sided paired t-test that `candidate` errors are smaller than
/// `incumbent` errors.
pub fn paired_t_test(candidate: &CvResult, incumbent: &CvResult, alpha: f64) -> Result<TTestOutcome> {
    let n = candidate.errors.len();
    if n != incumbent.errors.len() {
        return Err(EfmError::LengthMismatch {
            expected: incumbent.errors.len(),
            got: n,
        });
    }
    if n < 2 {
        return Err(EfmError::EmptyInput("paired t-test needs at least two folds".into()));
    }
    let diffs: Vec<f64> = incumbent.errors.iter().zip(&candidate.errors).map(|(i, c)| i - c).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| EfmError::Config(format!("t distribution: {e}")))?;
    let critical_value = dist.inverse_cdf(1.0 - alpha);
    let t_statistic = if var > 0.0 {
        mean / (var / n as f64).sqrt()
    } else if mean > 0.0 {
        f64::INFINITY
    } else if mean < 0.0 {
        f64::NEG_INFINITY
    } else {
        0.0
    };
    Ok(TTestOutcome {
        t_statistic,
        critical_value,
        significant: t_statistic > critical_value,
    })
}

/// Audit record of one search iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub iteration: usize,
    pub direction: SearchDirection,
    pub ranking: Vec<CandidateScore>,
    pub added_attributes: Vec<String>,
    pub added_interactions: Vec<(String, String)>,
    pub cv_errors: Option<Vec<f64>>,
    pub t_test: Option<TTestOutcome>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionOutcome {
    pub features: FeatureConfig,
    pub cv: CvResult,
    pub null_cv: CvResult,
    pub steps: Vec<SelectionStep>,
}

/// Greedy forward stepwise selection over `partition`.
pub fn gfsfs(
    data: &Dataset,
    partition: &KFoldPartition,
    kind: LossKind,
    cfg: &SelectionConfig,
    train: &TrainConfig,
) -> Result<SelectionOutcome> {
    cfg.validate()?;
    data.require_non_empty()?;
    let train = unregularized(train);
    let schema = data.schema();

    let null_cv = null_model_cv_errors(kind, partition, data)?;
    let mut best = FeatureConfig::null();
    let mut best_cv = null_cv.clone();
    let mut feasible_attributes = true;
    let mut feasible_interactions = true;
    let mut direction = SearchDirection::Attributes;
    let mut steps = Vec::new();

    let feasible = |d: SearchDirection, fa: bool, fi: bool| match d {
        SearchDirection::Attributes => fa,
        SearchDirection::Interactions => fi,
    };

    let mut iteration = 0;
    while feasible(direction, feasible_attributes, feasible_interactions) {
        iteration += 1;
        let step = fss(direction, &best, data, kind, cfg, &train)?;
        let (added_attributes, added_interactions) =
            FeatureConfig::new(step.attributes.clone(), step.interactions.clone()).describe(schema);
        let mut record = SelectionStep {
            iteration,
            direction,
            ranking: step.ranking.clone(),
            added_attributes,
            added_interactions,
            cv_errors: None,
            t_test: None,
            accepted: false,
        };
        let mut mark_infeasible = false;
        if step.is_empty() {
            mark_infeasible = true;
        } else {
            let candidate = best.extended(&step.attributes, &step.interactions);
            let cv = cross_validate(&candidate, partition, data, kind, &train)?;
            let test = paired_t_test(&cv, &best_cv, cfg.alpha)?;
            record.cv_errors = Some(cv.errors.clone());
            record.t_test = Some(test);
            if test.significant {
                log::info!(
                    "step {iteration}: accepted {:?} / {:?}, mean cv error {:.6}",
                    record.added_attributes,
                    record.added_interactions,
                    cv.mean()
                );
                best = candidate;
                best_cv = cv;
                record.accepted = true;
                feasible_attributes = true;
                feasible_interactions = true;
            } else {
                mark_infeasible = true;
            }
        }
        if mark_infeasible {
            match direction {
                SearchDirection::Attributes => feasible_attributes = false,
                SearchDirection::Interactions => feasible_interactions = false,
            }
        }
        steps.push(record);
        let other = direction.opposite();
        if feasible(other, feasible_attributes, feasible_interactions) {
            direction = other;
        }
    }
    Ok(SelectionOutcome {
        features: best,
        cv: best_cv,
        null_cv,
        steps,
    })
}
