//! Data drawn from a known exponential factorization machine, for checking
//! that training and selection recover what was planted.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::model::{self, FeatureConfig, ParamId, ParameterSet};
use crate::schema::{Attribute, AttributeSchema, Dataset, Interaction, Observation, Role, RowKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedConfig {
    pub train_rows: usize,
    pub test_rows: usize,
    pub levels: usize,
    /// Attributes `0..informative` carry effects; the rest are noise.
    pub informative: usize,
    pub noise_attributes: usize,
    /// Planted interactions, as index pairs among the informative attributes.
    pub interactions: Vec<(usize, usize)>,
    pub bias: f64,
    /// Level effects of an informative attribute are spread evenly over
    /// `[-effect_scale, effect_scale]` in shuffled order.
    pub effect_scale: f64,
    pub factor_scale: f64,
    pub f: usize,
    /// Standard deviation of the multiplicative log-normal noise.
    pub noise_sigma: f64,
    /// Rows are spread round-robin over this many items.
    pub items: usize,
    pub seed: u64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        PlantedConfig {
            train_rows: 400,
            test_rows: 200,
            levels: 3,
            informative: 2,
            noise_attributes: 5,
            interactions: Vec::new(),
            bias: 2.0,
            effect_scale: 0.8,
            factor_scale: 0.6,
            f: 2,
            noise_sigma: 0.1,
            items: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedData {
    pub train: Dataset,
    pub test: Dataset,
    pub features: FeatureConfig,
    pub params: ParameterSet,
}

impl PlantedData {
    /// Names of the planted attributes.
    pub fn informative_names(&self) -> Vec<String> {
        self.features.describe(self.train.schema()).0
    }
}

pub fn generate_planted(cfg: &PlantedConfig) -> Result<PlantedData> {
    if cfg.levels < 2 || cfg.train_rows == 0 || cfg.test_rows == 0 || cfg.items == 0 || cfg.f == 0 {
        return Err(EfmError::Config("planted data needs levels >= 2 and non-empty rows, items and f".into()));
    }
    let width = cfg.informative + cfg.noise_attributes;
    let mut attributes = Vec::with_capacity(width);
    for c in 0..width {
        let name = if c < cfg.informative {
            format!("signal{c}")
        } else {
            format!("noise{}", c - cfg.informative)
        };
        attributes.push(Attribute::categorical(name, (0..cfg.levels).map(|j| format!("v{j}")).collect()));
    }
    let schema = Arc::new(AttributeSchema::new(attributes)?);

    let mut interactions = Vec::with_capacity(cfg.interactions.len());
    for &(a, b) in &cfg.interactions {
        if a == b || a >= cfg.informative || b >= cfg.informative {
            return Err(EfmError::Config(format!("planted interaction ({a}, {b}) must join two informative attributes")));
        }
        interactions.push(Interaction::new(a, b));
    }
    let features = FeatureConfig::new((0..cfg.informative).collect(), interactions);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = ParameterSet::zeros(&schema, &features, cfg.f)?;
    params.set_bias(cfg.bias);
    let spread: Vec<f64> = (0..cfg.levels)
        .map(|j| cfg.effect_scale * (2.0 * j as f64 / (cfg.levels - 1) as f64 - 1.0))
        .collect();
    for &c in features.attributes() {
        let mut effects = spread.clone();
        effects.shuffle(&mut rng);
        for (j, value) in effects.into_iter().enumerate() {
            params.set(ParamId::Beta { attribute: c, level: j }, value)?;
        }
    }
    let factor = Normal::new(0.0, cfg.factor_scale).map_err(|e| EfmError::Config(e.to_string()))?;
    for c in features.interaction_attributes() {
        for j in 0..cfg.levels {
            for k in 0..cfg.f {
                params.set(ParamId::Mu { attribute: c, level: j, factor: k }, factor.sample(&mut rng))?;
            }
        }
    }

    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| EfmError::Config(e.to_string()))?;
    let draw = |count: usize, prefix: &str, rng: &mut ChaCha8Rng| -> Result<Vec<Observation>> {
        (0..count)
            .map(|i| {
                let levels = (0..width).map(|_| rng.random_range(0..cfg.levels)).collect();
                let key = RowKey::new(format!("item{}", i % cfg.items), format!("{prefix}{}", i / cfg.items));
                let mut obs = Observation::new(key, levels, 1.0);
                obs.response = model::forecast(&params, &features, &obs)? * noise.sample(rng).exp();
                Ok(obs)
            })
            .collect()
    };
    let train_rows = draw(cfg.train_rows, "train", &mut rng)?;
    let test_rows = draw(cfg.test_rows, "test", &mut rng)?;
    Ok(PlantedData {
        train: Dataset::new(schema.clone(), train_rows, Role::Training)?,
        test: Dataset::new(schema, test_rows, Role::Test)?,
        features,
        params,
    })
}
