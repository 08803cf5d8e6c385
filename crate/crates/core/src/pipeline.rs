//! End-to-end run: feature selection, regularized refit on the full training
//! set, then forecasting and scoring the test set.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::abgd::{self, TrainConfig};
use crate::error::{EfmError, Result};
use crate::ingest::{self, LoadOptions, SchemaSpec, UnseenPolicy};
use crate::loss::{self, Link, LossKind, RegularizerTable};
use crate::metrics::{self, EvaluationReport, TrainingDiagnostics};
use crate::model::{self, FeatureConfig, ModelFile};
use crate::schema::{partition_kfold, AttributeSchema, Dataset, Interaction, RowKey};
use crate::selection::{self, SelectionConfig, SelectionOutcome, SelectionStep};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Exponential factorization machine trained on raw responses.
    #[default]
    Efm,
    /// Plain factorization machine trained on log responses, using the
    /// features an EFM run selects.
    Logfm,
}

/// Training hyper-parameters. Unset entries take the student-performance
/// (Portuguese) defaults for the chosen loss.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub eta: Option<f64>,
    pub max_iterations: Option<usize>,
    pub lambda_v: Option<f64>,
    pub lambda_w: Option<f64>,
    pub sigma: Option<f64>,
    pub f: Option<usize>,
    pub epsilon: Option<f64>,
    pub seed: Option<u64>,
    pub early_stop: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSection {
    pub b: Option<usize>,
    pub g: Option<usize>,
    #[serde(rename = "lambda_A")]
    pub lambda_a: Option<f64>,
    #[serde(rename = "lambda_I")]
    pub lambda_i: Option<f64>,
    pub k: Option<usize>,
    pub alpha: Option<f64>,
    pub partition_seed: Option<u64>,
    /// Overrides for the fits run during selection. Unset keys follow the
    /// main training section; regularization is always off there.
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub schema: SchemaSpec,
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub unseen: UnseenPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub loss: LossKind,
    #[serde(default)]
    pub mode: Mode,
    /// Default seed for parameter initialization and fold assignment.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub selection: SelectionSection,
    pub data: Option<DataSection>,
    pub output_dir: Option<PathBuf>,
}

/// Default hyper-parameters tuned for the student-performance (Portuguese)
/// dataset.
pub fn default_hyperparameters(kind: LossKind) -> (TrainConfig, SelectionConfig) {
    let (eta, iterations, la, li, lv, lw) = match kind {
        LossKind::Pes => (4.95e-6, 4000, 0.005, 0.10, 1e-3, 10.0),
        LossKind::Es => (4.80e-10, 5000, 1000.0, 1000.0, 100.0, 0.0),
    };
    let train = TrainConfig::new(eta, iterations).with_reg(RegularizerTable {
        lambda_v: lv,
        lambda_w: lw,
    });
    (train, SelectionConfig::new(3, 2, la, li))
}

impl PipelineConfig {
    pub fn new(loss: LossKind) -> Self {
        PipelineConfig {
            loss,
            mode: Mode::Efm,
            seed: 0,
            train: TrainSection::default(),
            selection: SelectionSection::default(),
            data: None,
            output_dir: None,
        }
    }

    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let mut cfg: PipelineConfig =
            serde_json::from_str(&text).map_err(|e| EfmError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(data) = cfg.data.as_mut() {
            rebase(&mut data.train);
            rebase(&mut data.test);
        }
        if let Some(out) = cfg.output_dir.as_mut() {
            rebase(out);
        }
        Ok(cfg)
    }

    /// Run settings after filling in defaults.
    pub fn resolve(&self) -> Result<RunSettings> {
        let (mut train, mut sel) = default_hyperparameters(self.loss);
        train.seed = self.seed;
        let train = self.train.apply(train);
        let selection_train = self.selection.train.apply(train.clone());
        let s = &self.selection;
        sel.b = s.b.unwrap_or(sel.b);
        sel.g = s.g.unwrap_or(sel.g);
        sel.lambda_a = s.lambda_a.unwrap_or(sel.lambda_a);
        sel.lambda_i = s.lambda_i.unwrap_or(sel.lambda_i);
        sel.k = s.k.unwrap_or(sel.k);
        sel.alpha = s.alpha.unwrap_or(sel.alpha);
        sel.partition_seed = s.partition_seed.unwrap_or(self.seed);
        train.validate()?;
        selection_train.validate()?;
        sel.validate()?;
        Ok(RunSettings {
            loss: self.loss,
            mode: self.mode,
            selection: sel,
            selection_train,
            refit: train,
        })
    }
}

impl TrainSection {
    /// `base` with every key set here replaced.
    pub fn apply(&self, mut base: TrainConfig) -> TrainConfig {
        base.eta = self.eta.unwrap_or(base.eta);
        base.max_iterations = self.max_iterations.unwrap_or(base.max_iterations);
        base.reg.lambda_v = self.lambda_v.unwrap_or(base.reg.lambda_v);
        base.reg.lambda_w = self.lambda_w.unwrap_or(base.reg.lambda_w);
        base.sigma = self.sigma.unwrap_or(base.sigma);
        base.f = self.f.unwrap_or(base.f);
        base.epsilon = self.epsilon.or(base.epsilon);
        base.seed = self.seed.unwrap_or(base.seed);
        base.early_stop = self.early_stop.unwrap_or(base.early_stop);
        base
    }
}

/// Everything one run needs, with defaults filled in.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSettings {
    pub loss: LossKind,
    pub mode: Mode,
    pub selection: SelectionConfig,
    /// Fits inside feature selection. Its regularization is ignored.
    pub selection_train: TrainConfig,
    /// The final fit on the full training set.
    pub refit: TrainConfig,
}

impl RunSettings {
    /// Uses `train` both inside selection and for the final fit.
    pub fn new(loss: LossKind, mode: Mode, selection: SelectionConfig, train: TrainConfig) -> Self {
        RunSettings {
            loss,
            mode,
            selection,
            selection_train: train.clone(),
            refit: train,
        }
    }
}

/// Pipeline stages, in the order they ran.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Selection,
    Refit,
    TestLoad,
    Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRow {
    pub item: String,
    pub group: String,
    pub actual: f64,
    pub forecast: f64,
}

impl ForecastRow {
    pub fn key(&self) -> RowKey {
        RowKey::new(self.item.clone(), self.group.clone())
    }
}

/// Outcome of feature selection in a serializable form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub attributes: Vec<String>,
    pub interactions: Vec<(String, String)>,
    pub cv_errors: Vec<f64>,
    pub null_cv_errors: Vec<f64>,
    pub steps: Vec<SelectionStep>,
}

impl SelectionTrace {
    pub fn new(schema: &AttributeSchema, outcome: &SelectionOutcome) -> Self {
        let (attributes, interactions) = outcome.features.describe(schema);
        SelectionTrace {
            attributes,
            interactions,
            cv_errors: outcome.cv.errors.clone(),
            null_cv_errors: outcome.null_cv.errors.clone(),
            steps: outcome.steps.clone(),
        }
    }

    pub fn features(&self, schema: &AttributeSchema) -> Result<FeatureConfig> {
        features_from_names(schema, &self.attributes, &self.interactions)
    }
}

/// Looks up attribute and interaction names in `schema`.
pub fn features_from_names(
    schema: &AttributeSchema,
    attributes: &[String],
    interactions: &[(String, String)],
) -> Result<FeatureConfig> {
    let index = |name: &str| {
        schema
            .index_of(name)
            .ok_or_else(|| EfmError::Config(format!("unknown attribute {name:?}")))
    };
    let attributes = attributes.iter().map(|n| index(n)).collect::<Result<Vec<_>>>()?;
    let interactions = interactions
        .iter()
        .map(|(a, b)| {
            let (a, b) = (index(a)?, index(b)?);
            if a == b {
                return Err(EfmError::Config(format!("attribute {a} cannot interact with itself")));
            }
            Ok(Interaction::new(a, b))
        })
        .collect::<Result<Vec<_>>>()?;
    let features = FeatureConfig::new(attributes, interactions);
    features.validate(schema)?;
    Ok(features)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationSummary {
    pub model: EvaluationReport,
    /// The same metrics for a constant forecast at the training null level.
    pub null_model: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub model: ModelFile,
    pub forecasts: Vec<ForecastRow>,
    pub evaluation: EvaluationSummary,
    pub diagnostics: TrainingDiagnostics,
    pub selection: SelectionTrace,
    pub loss_curve: String,
    pub stages: Vec<Stage>,
}

/// Runs the configured mode, reading both datasets from the config.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Artifacts> {
    let data = cfg
        .data
        .as_ref()
        .ok_or_else(|| EfmError::Config("config has no data section".into()))?;
    let train = ingest::load_csv(&data.train, &data.schema, &LoadOptions::training())?;
    let settings = cfg.resolve()?;
    run_on_datasets(&settings, &train, |schema| {
        ingest::load_csv(&data.test, &data.schema, &LoadOptions::test(schema, data.unseen))
    })
}

/// Runs the log-response comparison on the configured data.
pub fn run_logfm(cfg: &PipelineConfig) -> Result<Artifacts> {
    run_pipeline(&PipelineConfig {
        mode: Mode::Logfm,
        ..cfg.clone()
    })
}

/// Selects features and refits on `train`, and only then calls `load_test`
/// with the training schema to obtain the rows to score.
pub fn run_on_datasets<F>(settings: &RunSettings, train: &Dataset, load_test: F) -> Result<Artifacts>
where
    F: FnOnce(Arc<AttributeSchema>) -> Result<Dataset>,
{
    let (kind, mode, sel_cfg, train_cfg) = (settings.loss, settings.mode, &settings.selection, &settings.refit);
    train_cfg.validate()?;
    settings.selection_train.validate()?;
    sel_cfg.validate()?;
    train.require_non_empty()?;
    let schema = train.shared_schema();
    let mut stages = Vec::new();

    let partition = partition_kfold(train, sel_cfg.k, sel_cfg.partition_seed)?;
    let outcome = selection::gfsfs(train, &partition, kind, sel_cfg, &settings.selection_train)?;
    let features = outcome.features.clone();
    stages.push(Stage::Selection);
    log::info!("selected features {:?}", features.describe(&schema));

    let actual_train = train.responses();
    let (report, link) = match mode {
        Mode::Efm => (abgd::train(train, &features, kind, train_cfg)?, Link::Exp),
        Mode::Logfm => {
            let targets: Vec<f64> = actual_train.iter().map(|d| d.ln()).collect();
            let report = abgd::train_on_targets(&schema, train.rows(), &targets, &features, kind, Link::Identity, train_cfg)?;
            (report, Link::Identity)
        }
    };
    let params = report.final_params.clone();
    stages.push(Stage::Refit);

    let scores = loss::predict_rows(&params, &features, train.rows(), Link::Identity)?;
    let fitted: Vec<f64> = scores.into_iter().map(model::forecast_from_score).collect();
    let diagnostics = metrics::diagnostics(&fitted, &actual_train)?;
    let null_level = selection::null_level(kind, &actual_train)?;
    let model = ModelFile::from_parts(&schema, &features, &params, link.name())?;

    stages.push(Stage::TestLoad);
    let test = load_test(schema.clone())?;
    if test.schema() != &*schema {
        return Err(EfmError::Schema("test set was not loaded against the training schema".into()));
    }
    let forecasts = forecast_dataset(&model, &test)?;
    let evaluation = EvaluationSummary {
        model: evaluate_forecasts(&forecasts)?,
        null_model: evaluate_forecasts(
            &forecasts
                .iter()
                .map(|r| ForecastRow {
                    forecast: null_level,
                    ..r.clone()
                })
                .collect::<Vec<_>>(),
        )?,
    };
    stages.push(Stage::Evaluation);

    Ok(Artifacts {
        model,
        forecasts,
        evaluation,
        diagnostics,
        selection: SelectionTrace::new(&schema, &outcome),
        loss_curve: report.trace_csv(),
        stages,
    })
}

/// Forecasts every row of `data` with a saved model. Both links
/// exponentiate the score: an identity-link model was fitted to log
/// responses.
pub fn forecast_dataset(model: &ModelFile, data: &Dataset) -> Result<Vec<ForecastRow>> {
    if data.schema().fingerprint() != model.schema_fingerprint {
        return Err(EfmError::Schema("data schema differs from the model's".into()));
    }
    let (features, params) = model.to_parts()?;
    let scores = loss::predict_rows(&params, &features, data.rows(), Link::Identity)?;
    Ok(data
        .rows()
        .iter()
        .zip(scores)
        .map(|(obs, s)| ForecastRow {
            item: obs.key.item.clone(),
            group: obs.key.group.clone(),
            actual: obs.response,
            forecast: model::forecast_from_score(s),
        })
        .collect())
}

pub fn evaluate_forecasts(rows: &[ForecastRow]) -> Result<EvaluationReport> {
    let mut forecasts = BTreeMap::new();
    let mut actuals = BTreeMap::new();
    for r in rows {
        if forecasts.insert(r.key(), r.forecast).is_some() {
            return Err(EfmError::KeyMismatch(format!("duplicate row key {}", r.key())));
        }
        actuals.insert(r.key(), r.actual);
    }
    metrics::evaluate(&forecasts, &actuals)
}

pub fn write_forecasts_csv(rows: &[ForecastRow], path: impl AsRef<Path>) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for r in rows {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_forecasts_csv(path: impl AsRef<Path>) -> Result<Vec<ForecastRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader
        .deserialize()
        .map(|r| r.map_err(EfmError::from))
        .collect()
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Writes every artifact into `dir`, creating it if needed.
pub fn write_artifacts(artifacts: &Artifacts, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    artifacts.model.write(dir.join("model.json"))?;
    write_forecasts_csv(&artifacts.forecasts, dir.join("forecasts.csv"))?;
    write_json(&artifacts.evaluation, dir.join("evaluation.json"))?;
    write_json(&artifacts.diagnostics, dir.join("diagnostics.json"))?;
    write_json(&artifacts.selection, dir.join("selection_trace.json"))?;
    fs::write(dir.join("loss_curve.csv"), &artifacts.loss_curve)?;
    Ok(())
}
