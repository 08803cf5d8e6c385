//! Attribute schema, observations, and dataset partitioning.
//!
//! Every observation activates exactly one level per attribute. A missing
//! cell is mapped to a synthetic level (`MISSING_LEVEL`) which is appended to
//! the attribute's level list the first time it is seen in training data.

use std::collections::HashSet;
use std::fmt;
use std::sync::Arc;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};

/// Name of the synthetic level that stands in for a missing value.
pub const MISSING_LEVEL: &str = "<missing>";

/// A categorical attribute and its ordered level list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub levels: Vec<String>,
    /// Upper bin edges (all but the last bin) when the attribute was
    /// discretized from a numeric column.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bin_edges: Option<Vec<f64>>,
}

impl Attribute {
    pub fn categorical(name: impl Into<String>, levels: Vec<String>) -> Self {
        Attribute {
            name: name.into(),
            levels,
            bin_edges: None,
        }
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_index(&self, level: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == level)
    }

    pub fn missing_level(&self) -> Option<usize> {
        self.level_index(MISSING_LEVEL)
    }
}

/// An unordered pair of distinct attributes, stored with `first < second`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Interaction {
    first: usize,
    second: usize,
}

impl Interaction {
    /// Builds the pair in canonical order. Panics if both indices are equal.
    pub fn new(a: usize, b: usize) -> Self {
        assert_ne!(a, b, "an interaction needs two distinct attributes");
        Interaction {
            first: a.min(b),
            second: a.max(b),
        }
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn second(&self) -> usize {
        self.second
    }

    pub fn contains(&self, attribute: usize) -> bool {
        self.first == attribute || self.second == attribute
    }

    pub fn shares_attribute(&self, other: &Interaction) -> bool {
        self.contains(other.first) || self.contains(other.second)
    }

    /// The attribute on the other side of the pair, if `attribute` belongs to it.
    pub fn partner(&self, attribute: usize) -> Option<usize> {
        if self.first == attribute {
            Some(self.second)
        } else if self.second == attribute {
            Some(self.first)
        } else {
            None
        }
    }
}

impl fmt::Display for Interaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {})", self.first, self.second)
    }
}

/// The attribute set and, implicitly, the interaction universe over it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let mut names = HashSet::new();
        for attr in &attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(EfmError::Schema(format!("duplicate attribute {:?}", attr.name)));
            }
            let mut levels = HashSet::new();
            for level in &attr.levels {
                if !levels.insert(level.as_str()) {
                    return Err(EfmError::Schema(format!(
                        "duplicate level {:?} in attribute {:?}",
                        level, attr.name
                    )));
                }
            }
        }
        Ok(AttributeSchema { attributes })
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn attribute(&self, c: usize) -> &Attribute {
        &self.attributes[c]
    }

    pub fn num_levels(&self, c: usize) -> usize {
        self.attributes[c].num_levels()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// All unordered attribute pairs, in lexicographic order.
    pub fn interaction_universe(&self) -> Vec<Interaction> {
        let a = self.attributes.len();
        let mut out = Vec::with_capacity(a * a.saturating_sub(1) / 2);
        for c in 0..a {
            for c2 in (c + 1)..a {
                out.push(Interaction::new(c, c2));
            }
        }
        out
    }

    /// Stable 64-bit FNV-1a digest over attribute and level names.
    pub fn fingerprint(&self) -> String {
        const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash = OFFSET;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                hash ^= u64::from(*b);
                hash = hash.wrapping_mul(PRIME);
            }
        };
        for attr in &self.attributes {
            feed(attr.name.as_bytes());
            feed(&[0x1f]);
            for level in &attr.levels {
                feed(level.as_bytes());
                feed(&[0x1e]);
            }
            feed(&[0x1d]);
        }
        format!("{hash:016x}")
    }

    pub(crate) fn push_level(&mut self, c: usize, level: &str) -> usize {
        let attr = &mut self.attributes[c];
        attr.levels.push(level.to_string());
        attr.levels.len() - 1
    }
}

/// Row identity: the item (SKU) and the group (store) it was observed in.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RowKey {
    pub item: String,
    pub group: String,
}

impl RowKey {
    pub fn new(item: impl Into<String>, group: impl Into<String>) -> Self {
        RowKey {
            item: item.into(),
            group: group.into(),
        }
    }
}

impl fmt::Display for RowKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.item, self.group)
    }
}

/// One encoded row: an active level per attribute and a positive response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub key: RowKey,
    pub levels: Vec<usize>,
    pub response: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<NaiveDate>,
}

impl Observation {
    pub fn new(key: RowKey, levels: Vec<usize>, response: f64) -> Self {
        Observation {
            key,
            levels,
            response,
            date: None,
        }
    }

    pub fn level(&self, c: usize) -> usize {
        self.levels[c]
    }

    /// The binary indicator x_{cj}.
    pub fn is_active(&self, c: usize, j: usize) -> bool {
        self.levels[c] == j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Training,
    Test,
}

/// Observations sharing one schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    schema: Arc<AttributeSchema>,
    rows: Vec<Observation>,
    role: Role,
}

impl Dataset {
    pub fn new(schema: Arc<AttributeSchema>, rows: Vec<Observation>, role: Role) -> Result<Self> {
        for (i, row) in rows.iter().enumerate() {
            if row.levels.len() != schema.len() {
                return Err(EfmError::Row {
                    row: i + 1,
                    message: format!(
                        "expected {} attribute levels, found {}",
                        schema.len(),
                        row.levels.len()
                    ),
                });
            }
            for (c, &j) in row.levels.iter().enumerate() {
                if j >= schema.num_levels(c) {
                    return Err(EfmError::Row {
                        row: i + 1,
                        message: format!(
                            "level index {j} out of range for attribute {:?}",
                            schema.attribute(c).name
                        ),
                    });
                }
            }
            if !(row.response.is_finite() && row.response > 0.0) {
                return Err(EfmError::Row {
                    row: i + 1,
                    message: format!("response must be positive, found {}", row.response),
                });
            }
        }
        Ok(Dataset { schema, rows, role })
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.schema
    }

    pub fn shared_schema(&self) -> Arc<AttributeSchema> {
        Arc::clone(&self.schema)
    }

    pub fn rows(&self) -> &[Observation] {
        &self.rows
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn responses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.response).collect()
    }

    /// Rows at `indices`, in the given order, with the same schema.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: Arc::clone(&self.schema),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            role: self.role,
        }
    }

    pub fn with_role(mut self, role: Role) -> Dataset {
        self.role = role;
        self
    }

    /// Errors if the dataset has no rows.
    pub fn require_non_empty(&self) -> Result<()> {
        if self.rows.is_empty() {
            Err(EfmError::EmptyInput("dataset has no rows".into()))
        } else {
            Ok(())
        }
    }
}

/// Partition rows into `(matching, rest)`; both sides must be non-empty.
pub fn split_by_key<F>(data: &Dataset, predicate: F) -> Result<(Dataset, Dataset)>
where
    F: Fn(&Observation) -> bool,
{
    let (train, test): (Vec<usize>, Vec<usize>) =
        (0..data.len()).partition(|&i| predicate(&data.rows[i]));
    if train.is_empty() {
        return Err(EfmError::Split("no rows matched the training predicate".into()));
    }
    if test.is_empty() {
        return Err(EfmError::Split("every row matched the training predicate; test set is empty".into()));
    }
    Ok((
        data.subset(&train).with_role(Role::Training),
        data.subset(&test).with_role(Role::Test),
    ))
}

/// Inclusive launch-date windows for a training/test split with a gap
/// between them (lead time plus product life).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DateWindows {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
}

impl DateWindows {
    /// Windows used for the footwear retailer: launches 2012-01-01..2013-04-14
    /// train, 2013-12-31..2014-05-03 test.
    pub fn retail_default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        DateWindows {
            train_start: d(2012, 1, 1),
            train_end: d(2013, 4, 14),
            test_start: d(2013, 12, 31),
            test_end: d(2014, 5, 3),
        }
    }
}

/// Split on each row's date; rows outside both windows are dropped.
pub fn split_by_date_windows(data: &Dataset, windows: &DateWindows) -> Result<(Dataset, Dataset)> {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, row) in data.rows.iter().enumerate() {
        let date = row.date.ok_or_else(|| EfmError::Row {
            row: i + 1,
            message: "row has no date".into(),
        })?;
        if date >= windows.train_start && date <= windows.train_end {
            train.push(i);
        } else if date >= windows.test_start && date <= windows.test_end {
            test.push(i);
        }
    }
    if train.is_empty() || test.is_empty() {
        return Err(EfmError::Split(format!(
            "date windows produced {} training and {} test rows",
            train.len(),
            test.len()
        )));
    }
    Ok((
        data.subset(&train).with_role(Role::Training),
        data.subset(&test).with_role(Role::Test),
    ))
}

/// A k-fold assignment of dataset rows. Folds are numbered `0..k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KFoldPartition {
    k: usize,
    seed: u64,
    keys: Vec<RowKey>,
    folds: Vec<usize>,
}

impl KFoldPartition {
    /// A partition with an explicit fold for each row of `data`.
    pub fn from_assignment(data: &Dataset, k: usize, folds: Vec<usize>, seed: u64) -> Result<Self> {
        if k < 2 {
            return Err(EfmError::Partition(format!("k must be at least 2, got {k}")));
        }
        if folds.len() != data.len() {
            return Err(EfmError::Partition(format!(
                "{} fold labels for {} rows",
                folds.len(),
                data.len()
            )));
        }
        if let Some(&f) = folds.iter().find(|&&f| f >= k) {
            return Err(EfmError::Partition(format!("fold {f} outside 0..{k}")));
        }
        Ok(KFoldPartition {
            k,
            seed,
            keys: data.rows.iter().map(|r| r.key.clone()).collect(),
            folds,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Fold of each row, aligned with the dataset's row order.
    pub fn assignment(&self) -> &[usize] {
        &self.folds
    }

    pub fn keys(&self) -> &[RowKey] {
        &self.keys
    }

    pub fn fold_of(&self, key: &RowKey) -> Option<usize> {
        self.keys.iter().position(|k| k == key).map(|i| self.folds[i])
    }

    /// Row indices held out in `fold`.
    pub fn fold_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] == fold).collect()
    }

    /// Row indices in every fold except `fold`.
    pub fn complement_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len()).filter(|&i| self.folds[i] != fold).collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.folds {
            sizes[f] += 1;
        }
        sizes
    }

    /// Checks that the partition was built for `data` (same row keys, same order).
    pub fn check_covers(&self, data: &Dataset) -> Result<()> {
        if self.keys.len() != data.len()
            || self.keys.iter().zip(data.rows()).any(|(k, r)| *k != r.key)
        {
            return Err(EfmError::Partition("partition does not match the dataset rows".into()));
        }
        Ok(())
    }
}

/// Randomly assigns rows to `k` folds whose sizes differ by at most one.
pub fn partition_kfold(data: &Dataset, k: usize, seed: u64) -> Result<KFoldPartition> {
    if k < 2 {
        return Err(EfmError::Partition(format!("k must be at least 2, got {k}")));
    }
    if k > data.len() {
        return Err(EfmError::Partition(format!(
            "cannot split {} rows into {k} folds",
            data.len()
        )));
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut folds = vec![0; data.len()];
    for (position, &row) in order.iter().enumerate() {
        folds[row] = position % k;
    }
    Ok(KFoldPartition {
        k,
        seed,
        keys: data.rows.iter().map(|r| r.key.clone()).collect(),
        folds,
    })
}
