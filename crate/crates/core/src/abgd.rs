//! Adaptive batch gradient descent.
//!
//! Every iteration uses all rows as one batch and updates all parameters
//! from the same pre-iteration values. The learning rate is halved whenever
//! the training error is already below a threshold but went up.

use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::loss::{self, Link, LossKind, RegularizerTable};
use crate::model::{FeatureConfig, ParameterSet};
use crate::schema::{AttributeSchema, Dataset, Observation};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    pub max_iterations: usize,
    #[serde(flatten)]
    pub reg: RegularizerTable,
    /// Threshold below which a rising training error halves the learning
    /// rate. Defaults by loss when unset.
    #[serde(default)]
    pub epsilon: Option<f64>,
    /// Standard deviation of the factor initialization.
    pub sigma: f64,
    pub f: usize,
    #[serde(default)]
    pub seed: u64,
    /// Stop once the training error changes by less than 1e-12.
    #[serde(default)]
    pub early_stop: bool,
}

impl TrainConfig {
    pub fn new(eta: f64, max_iterations: usize) -> Self {
        TrainConfig {
            eta,
            max_iterations,
            reg: RegularizerTable::none(),
            epsilon: None,
            sigma: 0.1,
            f: 2,
            seed: 0,
            early_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(EfmError::Config(msg));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if self.max_iterations == 0 {
            return bad("max_iterations must be at least 1".into());
        }
        if let Some(e) = self.epsilon {
            if !(e > 0.0) {
                return bad(format!("epsilon must be positive, got {e}"));
            }
        }
        if !(self.sigma >= 0.0) {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.f == 0 {
            return bad("f must be positive".into());
        }
        RegularizerTable::new(self.reg.lambda_v, self.reg.lambda_w)?;
        Ok(())
    }

    pub fn with_reg(mut self, reg: RegularizerTable) -> Self {
        self.reg = reg;
        self
    }
}

/// Default halving threshold for a loss, unless overridden.
pub fn resolve_epsilon(kind: LossKind, explicit: Option<f64>) -> f64 {
    explicit.unwrap_or(match kind {
        LossKind::Pes => 0.1,
        LossKind::Es => 1.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub training_error: f64,
    pub objective: f64,
    /// Learning rate used for this iteration's update.
    pub eta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_params: ParameterSet,
    pub trace: Vec<TracePoint>,
    pub halvings: usize,
}

impl TrainReport {
    /// Loss curve as CSV text.
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("iteration,objective,training_error,eta\n");
        for p in &self.trace {
            out.push_str(&format!("{},{},{},{}\n", p.iteration, p.objective, p.training_error, p.eta));
        }
        out
    }
}

/// Trains an EFM on `data`.
pub fn train(data: &Dataset, features: &FeatureConfig, kind: LossKind, cfg: &TrainConfig) -> Result<TrainReport> {
    data.require_non_empty()?;
    let targets = data.responses();
    train_on_targets(data.schema(), data.rows(), &targets, features, kind, Link::Exp, cfg)
}

/// Trains on explicit targets, which need not be the row responses. With the
/// identity link this fits a plain factorization machine.
pub fn train_on_targets(
    schema: &AttributeSchema,
    rows: &[Observation],
    targets: &[f64],
    features: &FeatureConfig,
    kind: LossKind,
    link: Link,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if rows.is_empty() {
        return Err(EfmError::EmptyInput("no training rows".into()));
    }
    if rows.len() != targets.len() {
        return Err(EfmError::LengthMismatch {
            expected: rows.len(),
            got: targets.len(),
        });
    }
    if kind == LossKind::Pes {
        if let Some((index, &value)) = targets.iter().enumerate().find(|(_, &y)| y == 0.0 || !y.is_finite()) {
            return Err(EfmError::NonPositiveActual { index, value });
        }
    }
    let epsilon = resolve_epsilon(kind, cfg.epsilon);
    let mut params = ParameterSet::initialize(schema, features, cfg.f, cfg.sigma, cfg.seed)?;
    let lambdas: Vec<f64> = (0..params.len()).map(|i| cfg.reg.lambda(params.group(i))).collect();

    let mut eta = cfg.eta;
    let mut halvings = 0;
    let mut previous_error = f64::INFINITY;
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut predictions = loss::predict_rows(&params, features, rows, link)?;

    for iteration in 1..=cfg.max_iterations {
        let grad = loss::loss_gradient_with_predictions(kind, link, &params, features, rows, &predictions, targets)?;
        for ((theta, g), lambda) in params.values_mut().iter_mut().zip(&grad).zip(&lambdas) {
            *theta -= eta * (g + lambda * *theta);
        }
        predictions = loss::predict_rows(&params, features, rows, link)?;
        let training_error = signed_target_error(kind, &predictions, targets);
        let objective = 0.5 * predictions
            .iter()
            .zip(targets)
            .map(|(&p, &y)| loss::term(kind, p, y))
            .sum::<f64>()
            + cfg.reg.penalty(&params);
        if !objective.is_finite() || !training_error.is_finite() || params.values().iter().any(|v| !v.is_finite()) {
            return Err(EfmError::Divergence { iteration, eta });
        }
        trace.push(TracePoint {
            iteration,
            training_error,
            objective,
            eta,
        });
        let converged = cfg.early_stop && (training_error - previous_error).abs() < 1e-12;
        if training_error < epsilon && training_error > previous_error {
            eta /= 2.0;
            halvings += 1;
        }
        previous_error = training_error;
        if converged {
            break;
        }
    }
    Ok(TrainReport {
        final_params: params,
        trace,
        halvings,
    })
}

/// Mean absolute (percentage) error where targets may be negative, as with
/// log responses.
fn signed_target_error(kind: LossKind, predictions: &[f64], targets: &[f64]) -> f64 {
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| match kind {
            LossKind::Es => (p - y).abs(),
            LossKind::Pes => ((p - y) / y).abs(),
        })
        .sum();
    total / targets.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Attribute, Interaction, Role, RowKey};
    use crate::test_support::small_instance;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn one_attribute_data(responses: &[f64], levels: &[usize]) -> Dataset {
        let schema = AttributeSchema::new(vec![Attribute::categorical("a", vec!["x".into(), "y".into()])]).unwrap();
        let rows = responses
            .iter()
            .zip(levels)
            .enumerate()
            .map(|(i, (&d, &l))| Observation::new(RowKey::new(i.to_string(), "g"), vec![l], d))
            .collect();
        Dataset::new(Arc::new(schema), rows, Role::Training).unwrap()
    }

    fn grid_minimizer(objective: impl Fn(f64) -> f64, lo: f64, hi: f64) -> f64 {
        // successive refinement of a uniform grid down to 1e-9 spacing
        let (mut lo, mut hi) = (lo, hi);
        let mut best = lo;
        while hi - lo > 1e-9 {
            let step = (hi - lo) / 100.0;
            best = (0..=100)
                .map(|i| lo + step * i as f64)
                .min_by(|a, b| objective(*a).total_cmp(&objective(*b)))
                .unwrap();
            lo = best - step;
            hi = best + step;
        }
        best
    }

    #[test]
    fn null_model_converges_to_minimizer() {
        let d = [1.0, 2.0, 4.0];
        let data = one_attribute_data(&d, &[0, 0, 0]);
        let es = |b: f64| d.iter().map(|x| (b.exp() - x).powi(2)).sum::<f64>();
        let pes = |b: f64| d.iter().map(|x| ((b.exp() - x) / x).powi(2)).sum::<f64>();
        for (kind, obj, analytic, eta) in [
            (LossKind::Es, &es as &dyn Fn(f64) -> f64, (7.0f64 / 3.0).ln(), 0.02),
            (LossKind::Pes, &pes, (4.0f64 / 3.0).ln(), 0.2),
        ] {
            let grid = grid_minimizer(obj, -3.0, 3.0);
            assert!((grid - analytic).abs() < 1e-6);
            let mut cfg = TrainConfig::new(eta, 3000);
            cfg.epsilon = Some(1e-9);
            let report = train(&data, &FeatureConfig::null(), kind, &cfg).unwrap();
            assert!((report.final_params.bias() - analytic).abs() < 1e-3, "{kind}");
        }
    }

    #[test]
    fn exact_fit_is_a_fixed_point() {
        let data = one_attribute_data(&[1.0, 1.0, 1.0], &[0, 1, 0]);
        let features = FeatureConfig::new(vec![0], vec![]);
        let mut cfg = TrainConfig::new(0.1, 50);
        cfg.sigma = 0.0;
        let report = train(&data, &features, LossKind::Pes, &cfg).unwrap();
        assert!(report.final_params.values().iter().all(|&v| v == 0.0));
        assert!(report.trace.iter().all(|p| p.training_error == 0.0));
    }

    #[test]
    fn epsilon_defaults() {
        assert_eq!(resolve_epsilon(LossKind::Pes, None), 0.1);
        assert_eq!(resolve_epsilon(LossKind::Es, None), 1.0);
        assert_eq!(resolve_epsilon(LossKind::Es, Some(0.05)), 0.05);
    }

    #[test]
    fn updates_are_simultaneous() {
        // one row at level 0 with bias and one attribute effect, both start at 0
        let data = one_attribute_data(&[4.0], &[0]);
        let features = FeatureConfig::new(vec![0], vec![]);
        let mut cfg = TrainConfig::new(0.1, 1);
        cfg.sigma = 0.0;
        let report = train(&data, &features, LossKind::Es, &cfg).unwrap();
        // gradient at zero: (1 - 4) * 1 = -3 for both, so each moves by 0.3
        let p = &report.final_params;
        assert!((p.bias() - 0.3).abs() < 1e-15);
        assert!((p.beta(0, 0).unwrap() - 0.3).abs() < 1e-15);
        // a sequential update would see exp(0.3) after moving the bias and
        // step the effect by -0.1 * (e^0.3 - 4) * e^0.3 instead
        let e = 0.3f64.exp();
        let sequential = -0.1 * (e - 4.0) * e;
        assert!((p.beta(0, 0).unwrap() - sequential).abs() > 1e-3);
    }

    #[test]
    fn divergence_is_reported() {
        let data = one_attribute_data(&[1.0, 100.0, 1000.0], &[0, 1, 0]);
        let features = FeatureConfig::new(vec![0], vec![]);
        let cfg = TrainConfig::new(10.0, 100);
        match train(&data, &features, LossKind::Es, &cfg) {
            Err(EfmError::Divergence { iteration, eta }) => {
                assert!(iteration >= 1);
                assert_eq!(eta, 10.0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn learning_rate_halves_near_optimum() {
        // a unit step overshoots this optimum until it is halved
        let data = one_attribute_data(&[1.0, 1.1, 1.2], &[0, 0, 0]);
        let cfg = TrainConfig::new(1.0, 200);
        let report = train(&data, &FeatureConfig::null(), LossKind::Pes, &cfg).unwrap();
        assert!(report.halvings > 0);
        assert!(report.trace.windows(2).all(|w| w[1].eta <= w[0].eta));
        let optimum = (data.responses().iter().map(|d| 1.0 / d).sum::<f64>()
            / data.responses().iter().map(|d| 1.0 / (d * d)).sum::<f64>())
        .ln();
        assert!((report.final_params.bias() - optimum).abs() < 1e-6);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let data = one_attribute_data(&[1.0, 2.0], &[0, 1]);
        let report = train(&data, &FeatureConfig::null(), LossKind::Es, &TrainConfig::new(0.01, 3)).unwrap();
        let csv = report.trace_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("iteration,objective,training_error,eta"));
    }

    /// A step small relative to the loss curvature at the data scale.
    fn stable_eta(data: &Dataset, kind: LossKind) -> f64 {
        match kind {
            LossKind::Es => 0.1 / data.responses().iter().map(|d| d * d).sum::<f64>(),
            LossKind::Pes => 0.1 / data.len() as f64,
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn training_is_deterministic_and_eta_never_rises(inst in small_instance(), seed in 0u64..1000) {
            for kind in [LossKind::Es, LossKind::Pes] {
                let mut cfg = TrainConfig::new(stable_eta(&inst.data, kind), 60);
                cfg.seed = seed;
                cfg.reg = RegularizerTable::new(0.01, 0.01).unwrap();
                let a = train(&inst.data, &inst.features, kind, &cfg).unwrap();
                let b = train(&inst.data, &inst.features, kind, &cfg).unwrap();
                prop_assert_eq!(&a, &b);
                prop_assert!(a.trace.len() <= cfg.max_iterations);
                prop_assert!(a.trace.windows(2).all(|w| w[1].eta <= w[0].eta));
            }
        }

        #[test]
        fn objective_descends_after_halving(inst in small_instance()) {
            let kind = LossKind::Pes;
            let mut cfg = TrainConfig::new(8.0 * stable_eta(&inst.data, kind), 400);
            cfg.epsilon = Some(10.0);
            let report = train(&inst.data, &inst.features, kind, &cfg).unwrap();
            if let Some(first) = report.trace.windows(2).position(|w| w[1].eta < w[0].eta) {
                let tail = &report.trace[first + 1..];
                for w in tail.windows(2) {
                    prop_assert!(w[1].objective <= w[0].objective + 1e-9 * w[0].objective.max(1.0));
                }
            }
        }
    }

    #[test]
    fn interaction_model_fits_planted_structure() {
        let schema = AttributeSchema::new(vec![
            Attribute::categorical("a", vec!["0".into(), "1".into()]),
            Attribute::categorical("b", vec!["0".into(), "1".into()]),
        ])
        .unwrap();
        let mut rows = Vec::new();
        for r in 0..40 {
            let (a, b) = (r % 2, (r / 2) % 2);
            let d = if a == b { 6.0 } else { 2.0 };
            rows.push(Observation::new(RowKey::new(r.to_string(), "g"), vec![a, b], d));
        }
        let data = Dataset::new(Arc::new(schema), rows, Role::Training).unwrap();
        let features = FeatureConfig::new(vec![], vec![Interaction::new(0, 1)]);
        let mut cfg = TrainConfig::new(0.002, 4000);
        cfg.sigma = 0.5;
        cfg.seed = 3;
        let report = train(&data, &features, LossKind::Pes, &cfg).unwrap();
        assert!(report.trace.last().unwrap().training_error < 0.01);
    }
}
