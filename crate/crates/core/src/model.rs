//! Parameters, feature sets, forecasts, and the per-parameter linear
//! decomposition of the log forecast.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::schema::{AttributeSchema, Interaction, Observation};

/// Exponents beyond this magnitude are clamped before `exp`.
pub const EXPONENT_LIMIT: f64 = 500.0;

static CLAMP_EVENTS: AtomicU64 = AtomicU64::new(0);

/// Number of times a forecast exponent has been clamped in this process.
pub fn clamp_events() -> u64 {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

fn clamped_exp(score: f64) -> f64 {
    if score.abs() > EXPONENT_LIMIT {
        CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
        if CLAMP_EVENTS.load(Ordering::Relaxed) == 1 {
            log::warn!("forecast exponent {score} clamped to +/-{EXPONENT_LIMIT}");
        }
        score.clamp(-EXPONENT_LIMIT, EXPONENT_LIMIT).exp()
    } else {
        score.exp()
    }
}

/// Selected attributes and interactions. Both lists are kept sorted.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureConfig {
    attributes: Vec<usize>,
    interactions: Vec<Interaction>,
}

impl FeatureConfig {
    pub fn new(mut attributes: Vec<usize>, mut interactions: Vec<Interaction>) -> Self {
        attributes.sort_unstable();
        attributes.dedup();
        interactions.sort_unstable();
        interactions.dedup();
        FeatureConfig {
            attributes,
            interactions,
        }
    }

    /// The intercept-only feature set.
    pub fn null() -> Self {
        FeatureConfig::default()
    }

    pub fn is_null(&self) -> bool {
        self.attributes.is_empty() && self.interactions.is_empty()
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn has_attribute(&self, c: usize) -> bool {
        self.attributes.binary_search(&c).is_ok()
    }

    pub fn has_interaction(&self, pair: &Interaction) -> bool {
        self.interactions.binary_search(pair).is_ok()
    }

    /// Attributes that appear in at least one selected interaction.
    pub fn interaction_attributes(&self) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .interactions
            .iter()
            .flat_map(|p| [p.first(), p.second()])
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn extended(&self, attributes: &[usize], interactions: &[Interaction]) -> Self {
        let mut a = self.attributes.clone();
        a.extend_from_slice(attributes);
        let mut i = self.interactions.clone();
        i.extend_from_slice(interactions);
        FeatureConfig::new(a, i)
    }

    pub fn validate(&self, schema: &AttributeSchema) -> Result<()> {
        let a = schema.len();
        if let Some(&c) = self.attributes.iter().find(|&&c| c >= a) {
            return Err(EfmError::Schema(format!("attribute index {c} outside schema of {a}")));
        }
        if let Some(p) = self.interactions.iter().find(|p| p.second() >= a) {
            return Err(EfmError::Schema(format!("interaction {p} outside schema of {a}")));
        }
        Ok(())
    }

    /// Human-readable feature names in schema terms.
    pub fn describe(&self, schema: &AttributeSchema) -> (Vec<String>, Vec<(String, String)>) {
        let attrs = self
            .attributes
            .iter()
            .map(|&c| schema.attribute(c).name.clone())
            .collect();
        let pairs = self
            .interactions
            .iter()
            .map(|p| {
                (
                    schema.attribute(p.first()).name.clone(),
                    schema.attribute(p.second()).name.clone(),
                )
            })
            .collect();
        (attrs, pairs)
    }
}

/// Identifies one scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamId {
    Bias,
    Beta { attribute: usize, level: usize },
    Mu { attribute: usize, level: usize, factor: usize },
}

/// Which regularization group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Bias,
    Beta,
    Mu,
}

/// All model parameters in one flat vector:
/// `[bias, beta blocks (attribute order), mu blocks (attribute order)]`.
/// A beta block holds one value per level; a mu block holds `f` values per
/// level, level-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    f: usize,
    num_levels: Vec<usize>,
    beta_offset: Vec<Option<usize>>,
    mu_offset: Vec<Option<usize>>,
    mu_start: usize,
    values: Vec<f64>,
}

impl ParameterSet {
    /// All-zero parameters covering `features` over every level of `schema`.
    pub fn zeros(schema: &AttributeSchema, features: &FeatureConfig, f: usize) -> Result<Self> {
        if f == 0 {
            return Err(EfmError::Config("factorization dimensionality f must be positive".into()));
        }
        features.validate(schema)?;
        let a = schema.len();
        let num_levels: Vec<usize> = (0..a).map(|c| schema.num_levels(c)).collect();
        let mut next = 1;
        let mut beta_offset = vec![None; a];
        for &c in features.attributes() {
            beta_offset[c] = Some(next);
            next += num_levels[c];
        }
        let mu_start = next;
        let mut mu_offset = vec![None; a];
        for c in features.interaction_attributes() {
            mu_offset[c] = Some(next);
            next += num_levels[c] * f;
        }
        Ok(ParameterSet {
            f,
            num_levels,
            beta_offset,
            mu_offset,
            mu_start,
            values: vec![0.0; next],
        })
    }

    /// Zero bias and attribute effects with factor entries drawn from
    /// `Normal(0, sigma)` in layout order.
    pub fn initialize(
        schema: &AttributeSchema,
        features: &FeatureConfig,
        f: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut params = Self::zeros(schema, features, f)?;
        let normal = Normal::new(0.0, sigma)
            .map_err(|e| EfmError::Config(format!("invalid initialization sigma {sigma}: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let start = params.mu_start;
        for v in &mut params.values[start..] {
            *v = normal.sample(&mut rng);
        }
        Ok(params)
    }

    pub fn f(&self) -> usize {
        self.f
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn bias(&self) -> f64 {
        self.values[0]
    }

    pub fn set_bias(&mut self, value: f64) {
        self.values[0] = value;
    }

    pub fn num_attributes(&self) -> usize {
        self.num_levels.len()
    }

    pub fn group(&self, index: usize) -> ParamGroup {
        if index == 0 {
            ParamGroup::Bias
        } else if index < self.mu_start {
            ParamGroup::Beta
        } else {
            ParamGroup::Mu
        }
    }

    /// Flat index range of the attribute-effect block.
    pub fn beta_range(&self) -> std::ops::Range<usize> {
        1..self.mu_start
    }

    /// Flat index range of the factor block.
    pub fn mu_range(&self) -> std::ops::Range<usize> {
        self.mu_start..self.values.len()
    }

    pub fn has_beta(&self, c: usize) -> bool {
        self.beta_offset.get(c).is_some_and(Option::is_some)
    }

    pub fn has_mu(&self, c: usize) -> bool {
        self.mu_offset.get(c).is_some_and(Option::is_some)
    }

    fn miss(what: String) -> EfmError {
        EfmError::MissingParameter(what)
    }

    /// Flat index of a parameter.
    pub fn index_of(&self, id: ParamId) -> Result<usize> {
        match id {
            ParamId::Bias => Ok(0),
            ParamId::Beta { attribute, level } => self.beta_index(attribute, level),
            ParamId::Mu {
                attribute,
                level,
                factor,
            } => {
                if factor >= self.f {
                    return Err(Self::miss(format!("factor {factor} with f = {}", self.f)));
                }
                Ok(self.mu_index(attribute, level)? + factor)
            }
        }
    }

    fn beta_index(&self, c: usize, j: usize) -> Result<usize> {
        match self.beta_offset.get(c).copied().flatten() {
            Some(off) if j < self.num_levels[c] => Ok(off + j),
            Some(_) => Err(Self::miss(format!("beta for attribute {c}, level {j}"))),
            None => Err(Self::miss(format!("beta for attribute {c}"))),
        }
    }

    /// Index of the first factor entry of `(c, j)`.
    fn mu_index(&self, c: usize, j: usize) -> Result<usize> {
        match self.mu_offset.get(c).copied().flatten() {
            Some(off) if j < self.num_levels[c] => Ok(off + j * self.f),
            Some(_) => Err(Self::miss(format!("factor vector for attribute {c}, level {j}"))),
            None => Err(Self::miss(format!("factor vector for attribute {c}"))),
        }
    }

    pub fn get(&self, id: ParamId) -> Result<f64> {
        Ok(self.values[self.index_of(id)?])
    }

    pub fn set(&mut self, id: ParamId, value: f64) -> Result<()> {
        let i = self.index_of(id)?;
        self.values[i] = value;
        Ok(())
    }

    pub fn beta(&self, c: usize, j: usize) -> Result<f64> {
        Ok(self.values[self.beta_index(c, j)?])
    }

    pub fn mu(&self, c: usize, j: usize) -> Result<&[f64]> {
        let i = self.mu_index(c, j)?;
        Ok(&self.values[i..i + self.f])
    }

    /// Identifier of every parameter in flat order.
    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Bias];
        for (c, off) in self.beta_offset.iter().enumerate() {
            if off.is_some() {
                ids.extend((0..self.num_levels[c]).map(|level| ParamId::Beta { attribute: c, level }));
            }
        }
        for (c, off) in self.mu_offset.iter().enumerate() {
            if off.is_some() {
                for level in 0..self.num_levels[c] {
                    ids.extend((0..self.f).map(|factor| ParamId::Mu {
                        attribute: c,
                        level,
                        factor,
                    }));
                }
            }
        }
        ids
    }

    /// Checks that every attribute used by `features` has parameters.
    pub fn check_covers(&self, features: &FeatureConfig) -> Result<()> {
        for &c in features.attributes() {
            if !self.has_beta(c) {
                return Err(Self::miss(format!("beta for attribute {c}")));
            }
        }
        for c in features.interaction_attributes() {
            if !self.has_mu(c) {
                return Err(Self::miss(format!("factor vector for attribute {c}")));
            }
        }
        Ok(())
    }

    fn dot(&self, a: usize, b: usize) -> f64 {
        let f = self.f;
        self.values[a..a + f]
            .iter()
            .zip(&self.values[b..b + f])
            .map(|(x, y)| x * y)
            .sum()
    }

    /// Un-exponentiated model score.
    pub fn score(&self, features: &FeatureConfig, obs: &Observation) -> Result<f64> {
        let mut s = self.values[0];
        for &c in features.attributes() {
            s += self.values[self.beta_index(c, level_of(obs, c)?)?];
        }
        for p in features.interactions() {
            let a = self.mu_index(p.first(), level_of(obs, p.first())?)?;
            let b = self.mu_index(p.second(), level_of(obs, p.second())?)?;
            s += self.dot(a, b);
        }
        Ok(s)
    }

    /// Adds `weight * d score / d theta` for every parameter into `grad`.
    pub fn accumulate_score_gradient(
        &self,
        features: &FeatureConfig,
        obs: &Observation,
        weight: f64,
        grad: &mut [f64],
    ) -> Result<()> {
        grad[0] += weight;
        for &c in features.attributes() {
            grad[self.beta_index(c, level_of(obs, c)?)?] += weight;
        }
        let f = self.f;
        for p in features.interactions() {
            let a = self.mu_index(p.first(), level_of(obs, p.first())?)?;
            let b = self.mu_index(p.second(), level_of(obs, p.second())?)?;
            for q in 0..f {
                grad[a + q] += weight * self.values[b + q];
                grad[b + q] += weight * self.values[a + q];
            }
        }
        Ok(())
    }
}

fn level_of(obs: &Observation, c: usize) -> Result<usize> {
    obs.levels
        .get(c)
        .copied()
        .ok_or_else(|| EfmError::MissingParameter(format!("observation has no level for attribute {c}")))
}

/// EFM forecast `exp(score)`, always positive.
pub fn forecast(params: &ParameterSet, features: &FeatureConfig, obs: &Observation) -> Result<f64> {
    Ok(clamped_exp(params.score(features, obs)?))
}

/// `exp(score)` with the exponent clamp applied.
pub fn forecast_from_score(score: f64) -> f64 {
    clamped_exp(score)
}

/// Linear score of the plain factorization machine.
pub fn logfm_forecast(params: &ParameterSet, features: &FeatureConfig, obs: &Observation) -> Result<f64> {
    params.score(features, obs)
}

/// `log forecast = theta * h + g` with `h` and `g` independent of `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDecomposition {
    pub h: f64,
    pub g: f64,
}

/// Coefficient and remainder of one parameter in the log forecast.
pub fn decompose(
    params: &ParameterSet,
    features: &FeatureConfig,
    obs: &Observation,
    which: ParamId,
) -> Result<LinearDecomposition> {
    params.get(which)?;
    let h = match which {
        ParamId::Bias => 1.0,
        ParamId::Beta { attribute, level } => {
            if features.has_attribute(attribute) && level_of(obs, attribute)? == level {
                1.0
            } else {
                0.0
            }
        }
        ParamId::Mu {
            attribute,
            level,
            factor,
        } => {
            if level_of(obs, attribute)? != level {
                0.0
            } else {
                let mut h = 0.0;
                for p in features.interactions() {
                    if let Some(partner) = p.partner(attribute) {
                        h += params.mu(partner, level_of(obs, partner)?)?[factor];
                    }
                }
                h
            }
        }
    };
    let g = if h == 0.0 {
        params.score(features, obs)?
    } else {
        let mut zeroed = params.clone();
        zeroed.set(which, 0.0)?;
        zeroed.score(features, obs)?
    };
    Ok(LinearDecomposition { h, g })
}

const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelValue {
    pub level: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelVector {
    pub level: String,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaTable {
    pub attribute: String,
    pub levels: Vec<LevelValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MuTable {
    pub attribute: String,
    pub levels: Vec<LevelVector>,
}

/// Serialized model: schema, selected features, and named parameter tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub format_version: u32,
    pub schema_fingerprint: String,
    pub schema: AttributeSchema,
    /// "exp" for an EFM, "identity" for a plain FM trained on log responses.
    pub link: String,
    pub f: usize,
    pub attributes: Vec<String>,
    pub interactions: Vec<(String, String)>,
    pub beta0: f64,
    pub beta: Vec<BetaTable>,
    pub mu: Vec<MuTable>,
}

impl ModelFile {
    pub fn from_parts(
        schema: &AttributeSchema,
        features: &FeatureConfig,
        params: &ParameterSet,
        link: &str,
    ) -> Result<Self> {
        params.check_covers(features)?;
        let (attributes, interactions) = features.describe(schema);
        let mut beta = Vec::new();
        for &c in features.attributes() {
            let attr = schema.attribute(c);
            let levels = (0..attr.num_levels())
                .map(|j| {
                    Ok(LevelValue {
                        level: attr.levels[j].clone(),
                        value: params.beta(c, j)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            beta.push(BetaTable {
                attribute: attr.name.clone(),
                levels,
            });
        }
        let mut mu = Vec::new();
        for c in features.interaction_attributes() {
            let attr = schema.attribute(c);
            let levels = (0..attr.num_levels())
                .map(|j| {
                    Ok(LevelVector {
                        level: attr.levels[j].clone(),
                        vector: params.mu(c, j)?.to_vec(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            mu.push(MuTable {
                attribute: attr.name.clone(),
                levels,
            });
        }
        Ok(ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            schema_fingerprint: schema.fingerprint(),
            schema: schema.clone(),
            link: link.to_string(),
            f: params.f(),
            attributes,
            interactions,
            beta0: params.bias(),
            beta,
            mu,
        })
    }

    /// Rebuilds the feature set and parameters.
    pub fn to_parts(&self) -> Result<(FeatureConfig, ParameterSet)> {
        if self.format_version != MODEL_FORMAT_VERSION {
            return Err(EfmError::Schema(format!(
                "unsupported model format version {}",
                self.format_version
            )));
        }
        if self.schema.fingerprint() != self.schema_fingerprint {
            return Err(EfmError::Schema("model schema does not match its fingerprint".into()));
        }
        let schema = &self.schema;
        let attr_index = |name: &str| {
            schema
                .index_of(name)
                .ok_or_else(|| EfmError::Schema(format!("model references unknown attribute {name:?}")))
        };
        let attributes = self
            .attributes
            .iter()
            .map(|n| attr_index(n))
            .collect::<Result<Vec<_>>>()?;
        let interactions = self
            .interactions
            .iter()
            .map(|(a, b)| {
                let (a, b) = (attr_index(a)?, attr_index(b)?);
                if a == b {
                    return Err(EfmError::Schema(format!("self-interaction on attribute {a}")));
                }
                Ok(Interaction::new(a, b))
            })
            .collect::<Result<Vec<_>>>()?;
        let features = FeatureConfig::new(attributes, interactions);
        let mut params = ParameterSet::zeros(schema, &features, self.f)?;
        params.set_bias(self.beta0);
        for table in &self.beta {
            let c = attr_index(&table.attribute)?;
            for lv in &table.levels {
                let j = level_index(schema, c, &lv.level)?;
                params.set(ParamId::Beta { attribute: c, level: j }, lv.value)?;
            }
        }
        for table in &self.mu {
            let c = attr_index(&table.attribute)?;
            for lv in &table.levels {
                let j = level_index(schema, c, &lv.level)?;
                if lv.vector.len() != self.f {
                    return Err(EfmError::LengthMismatch {
                        expected: self.f,
                        got: lv.vector.len(),
                    });
                }
                for (q, &v) in lv.vector.iter().enumerate() {
                    params.set(
                        ParamId::Mu {
                            attribute: c,
                            level: j,
                            factor: q,
                        },
                        v,
                    )?;
                }
            }
        }
        Ok((features, params))
    }

    /// Writes pretty JSON with a trailing newline.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

fn level_index(schema: &AttributeSchema, c: usize, level: &str) -> Result<usize> {
    schema
        .attribute(c)
        .level_index(level)
        .ok_or_else(|| EfmError::Schema(format!("model references unknown level {level:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schema::{Attribute, RowKey};
    use crate::test_support::{small_instance, SmallInstance};
    use proptest::prelude::*;

    fn two_attribute_schema() -> AttributeSchema {
        AttributeSchema::new(vec![
            Attribute::categorical("a", vec!["x".into()]),
            Attribute::categorical("b", vec!["y".into()]),
        ])
        .unwrap()
    }

    fn row(levels: Vec<usize>) -> Observation {
        Observation::new(RowKey::new("i", "g"), levels, 1.0)
    }

    #[test]
    fn zero_parameters_forecast_one() {
        let schema = two_attribute_schema();
        let features = FeatureConfig::new(vec![0, 1], vec![Interaction::new(0, 1)]);
        let params = ParameterSet::zeros(&schema, &features, 2).unwrap();
        assert_eq!(forecast(&params, &features, &row(vec![0, 0])).unwrap(), 1.0);
        assert_eq!(logfm_forecast(&params, &features, &row(vec![0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn bias_only() {
        let schema = two_attribute_schema();
        let features = FeatureConfig::null();
        let mut params = ParameterSet::zeros(&schema, &features, 2).unwrap();
        params.set_bias(2f64.ln());
        assert!((forecast(&params, &features, &row(vec![0, 0])).unwrap() - 2.0).abs() < 1e-15);
        params.set_bias(1.5);
        assert_eq!(logfm_forecast(&params, &features, &row(vec![0, 0])).unwrap(), 1.5);
    }

    #[test]
    fn hand_evaluated_instance() {
        let schema = two_attribute_schema();
        let features = FeatureConfig::new(vec![0, 1], vec![Interaction::new(0, 1)]);
        let mut params = ParameterSet::zeros(&schema, &features, 2).unwrap();
        params.set(ParamId::Beta { attribute: 0, level: 0 }, 0.1).unwrap();
        params.set(ParamId::Beta { attribute: 1, level: 0 }, 0.2).unwrap();
        for (c, v) in [(0, [1.0, 0.0]), (1, [0.5, 0.5])] {
            for (q, x) in v.into_iter().enumerate() {
                params
                    .set(
                        ParamId::Mu {
                            attribute: c,
                            level: 0,
                            factor: q,
                        },
                        x,
                    )
                    .unwrap();
            }
        }
        let obs = row(vec![0, 0]);
        // 0.1 + 0.2 + (1*0.5 + 0*0.5)
        let expected = 0.1 + 0.2 + 0.5;
        assert!((logfm_forecast(&params, &features, &obs).unwrap() - expected).abs() < 1e-15);
        assert!((forecast(&params, &features, &obs).unwrap() - f64::exp(0.8)).abs() < 1e-14);
    }

    #[test]
    fn missing_parameter_errors() {
        let schema = two_attribute_schema();
        let params = ParameterSet::zeros(&schema, &FeatureConfig::null(), 2).unwrap();
        let features = FeatureConfig::new(vec![0], vec![]);
        assert!(matches!(
            forecast(&params, &features, &row(vec![0, 0])),
            Err(EfmError::MissingParameter(_))
        ));
        assert!(matches!(
            params.get(ParamId::Beta { attribute: 1, level: 0 }),
            Err(EfmError::MissingParameter(_))
        ));
        let features = FeatureConfig::new(vec![0], vec![]);
        let params = ParameterSet::zeros(&schema, &features, 2).unwrap();
        assert!(matches!(
            forecast(&params, &features, &row(vec![3, 0])),
            Err(EfmError::MissingParameter(_))
        ));
    }

    #[test]
    fn bias_decomposition_has_unit_slope() {
        let schema = two_attribute_schema();
        let features = FeatureConfig::new(vec![0], vec![]);
        let params = ParameterSet::zeros(&schema, &features, 2).unwrap();
        let d = decompose(&params, &features, &row(vec![0, 0]), ParamId::Bias).unwrap();
        assert_eq!(d.h, 1.0);
    }

    #[test]
    fn initialization_is_seeded() {
        let schema = two_attribute_schema();
        let features = FeatureConfig::new(vec![0], vec![Interaction::new(0, 1)]);
        let a = ParameterSet::initialize(&schema, &features, 2, 0.1, 7).unwrap();
        let b = ParameterSet::initialize(&schema, &features, 2, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.bias(), 0.0);
        assert_eq!(a.beta(0, 0).unwrap(), 0.0);
        assert!(a.values()[a.mu_range()].iter().all(|v| *v != 0.0));
    }

    #[test]
    fn model_file_round_trip() {
        let inst = SmallInstance::fixed();
        let file = ModelFile::from_parts(inst.data.schema(), &inst.features, &inst.params, "exp").unwrap();
        let text = serde_json::to_string(&file).unwrap();
        let back: ModelFile = serde_json::from_str(&text).unwrap();
        let (features, params) = back.to_parts().unwrap();
        assert_eq!(features, inst.features);
        assert_eq!(params, inst.params);
    }

    proptest! {
        #[test]
        fn forecast_is_positive(inst in small_instance()) {
            for obs in inst.data.rows() {
                prop_assert!(forecast(&inst.params, &inst.features, obs).unwrap() > 0.0);
            }
        }

        #[test]
        fn log_forecast_is_affine_in_each_parameter(inst in small_instance(), delta in -0.5f64..0.5) {
            let obs = &inst.data.rows()[0];
            for id in inst.params.ids() {
                let dec = decompose(&inst.params, &inst.features, obs, id).unwrap();
                let theta = inst.params.get(id).unwrap();
                let direct = forecast(&inst.params, &inst.features, obs).unwrap();
                let rebuilt = (theta * dec.h + dec.g).exp();
                prop_assert!((rebuilt - direct).abs() <= 1e-12 * direct);

                let mut moved = inst.params.clone();
                moved.set(id, theta + delta).unwrap();
                let log_diff = moved.score(&inst.features, obs).unwrap()
                    - inst.params.score(&inst.features, obs).unwrap();
                prop_assert!((log_diff - delta * dec.h).abs() < 1e-10);
            }
        }

        #[test]
        fn inactive_factors_do_not_matter(inst in small_instance(), delta in -1.0f64..1.0) {
            let obs = &inst.data.rows()[0];
            let before = forecast(&inst.params, &inst.features, obs).unwrap();
            for id in inst.params.ids() {
                if let ParamId::Mu { attribute, level, .. } = id {
                    if obs.level(attribute) != level {
                        let mut moved = inst.params.clone();
                        let v = moved.get(id).unwrap();
                        moved.set(id, v + delta).unwrap();
                        prop_assert_eq!(forecast(&moved, &inst.features, obs).unwrap(), before);
                    }
                }
            }
        }

        #[test]
        fn bias_shift_scales_forecasts(inst in small_instance(), c in 0.01f64..100.0) {
            let mut shifted = inst.params.clone();
            shifted.set_bias(inst.params.bias() + c.ln());
            for obs in inst.data.rows() {
                let a = forecast(&inst.params, &inst.features, obs).unwrap();
                let b = forecast(&shifted, &inst.features, obs).unwrap();
                prop_assert!((b - c * a).abs() <= 1e-12 * b);
            }
        }

        #[test]
        fn score_gradient_matches_decomposition(inst in small_instance()) {
            let obs = &inst.data.rows()[0];
            let mut grad = vec![0.0; inst.params.len()];
            inst.params.accumulate_score_gradient(&inst.features, obs, 1.0, &mut grad).unwrap();
            for (i, id) in inst.params.ids().into_iter().enumerate() {
                let dec = decompose(&inst.params, &inst.features, obs, id).unwrap();
                prop_assert!((grad[i] - dec.h).abs() < 1e-12);
            }
        }
    }
}
