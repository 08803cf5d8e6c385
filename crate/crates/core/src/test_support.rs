//! Random small instances shared by unit tests.

use std::sync::Arc;

use proptest::prelude::*;

use crate::model::{FeatureConfig, ParameterSet};
use crate::schema::{Attribute, AttributeSchema, Dataset, Interaction, Observation, Role, RowKey};

#[derive(Debug, Clone)]
pub struct SmallInstance {
    pub data: Dataset,
    pub features: FeatureConfig,
    pub params: ParameterSet,
}

impl SmallInstance {
    pub fn build(
        levels: &[usize],
        rows: &[(Vec<usize>, f64)],
        attr_mask: &[bool],
        pair_mask: &[bool],
        values: &[f64],
    ) -> SmallInstance {
        let schema = AttributeSchema::new(
            levels
                .iter()
                .enumerate()
                .map(|(c, &l)| Attribute::categorical(format!("a{c}"), (0..l).map(|j| format!("l{j}")).collect()))
                .collect(),
        )
        .unwrap();
        let universe = schema.interaction_universe();
        let attrs = (0..levels.len()).filter(|&c| attr_mask[c % attr_mask.len()]).collect();
        let pairs: Vec<Interaction> = universe
            .iter()
            .enumerate()
            .filter(|(i, _)| pair_mask[i % pair_mask.len()])
            .map(|(_, p)| *p)
            .collect();
        let features = FeatureConfig::new(attrs, pairs);
        let mut params = ParameterSet::zeros(&schema, &features, 2).unwrap();
        for (i, v) in params.values_mut().iter_mut().enumerate() {
            *v = values[i % values.len()];
        }
        let obs = rows
            .iter()
            .enumerate()
            .map(|(r, (lv, d))| {
                let lv = lv.iter().zip(levels).map(|(&x, &l)| x % l).collect();
                Observation::new(RowKey::new(format!("item{}", r % 5), format!("g{r}")), lv, *d)
            })
            .collect();
        let data = Dataset::new(Arc::new(schema), obs, Role::Training).unwrap();
        SmallInstance { data, features, params }
    }

    pub fn fixed() -> SmallInstance {
        SmallInstance::build(
            &[2, 3, 2],
            &[
                (vec![0, 0, 1], 2.0),
                (vec![1, 2, 0], 5.0),
                (vec![0, 1, 1], 1.5),
                (vec![1, 1, 0], 8.0),
            ],
            &[true, false, true],
            &[true, false, true],
            &[0.3, -0.2, 0.15, 0.4, -0.35, 0.05, 0.25],
        )
    }
}

/// Up to 4 attributes with up to 3 levels, up to 40 rows, f = 2.
pub fn small_instance() -> impl Strategy<Value = SmallInstance> {
    (1usize..=4)
        .prop_flat_map(|a| {
            (
                prop::collection::vec(1usize..=3, a),
                prop::collection::vec((prop::collection::vec(0usize..3, a), 0.5f64..20.0), 1..=40),
                prop::collection::vec(any::<bool>(), a),
                prop::collection::vec(any::<bool>(), 6),
                prop::collection::vec(-0.5f64..0.5, 1..=64),
            )
        })
        .prop_map(|(levels, rows, attr_mask, pair_mask, values)| {
            SmallInstance::build(&levels, &rows, &attr_mask, &pair_mask, &values)
        })
}
