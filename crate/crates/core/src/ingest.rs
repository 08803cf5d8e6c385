//! CSV ingestion, equal-frequency discretization, and CSV export of datasets.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{EfmError, Result};
use crate::schema::{Attribute, AttributeSchema, Dataset, Observation, Role, RowKey, MISSING_LEVEL};

/// A numeric column to be discretized into equal-frequency bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NumericColumn {
    pub column: String,
    pub bins: usize,
}

/// Column mapping read from the JSON sidecar next to a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub response: String,
    #[serde(default)]
    pub attributes: Vec<String>,
    #[serde(default)]
    pub numeric: Vec<NumericColumn>,
    #[serde(default)]
    pub item_column: Option<String>,
    #[serde(default)]
    pub group_column: Option<String>,
    #[serde(default)]
    pub date_column: Option<String>,
    #[serde(default = "default_date_format")]
    pub date_format: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    /// Cell values treated as missing (after trimming).
    #[serde(default = "default_missing_tokens")]
    pub missing_tokens: Vec<String>,
    /// Responses at or below zero are replaced with this value when set.
    #[serde(default)]
    pub zero_response_replacement: Option<f64>,
}

fn default_date_format() -> String {
    "%Y-%m-%d".to_string()
}

fn default_delimiter() -> char {
    ','
}

fn default_missing_tokens() -> Vec<String> {
    vec![String::new()]
}

impl SchemaSpec {
    pub fn new(response: impl Into<String>, attributes: Vec<String>) -> Self {
        SchemaSpec {
            response: response.into(),
            attributes,
            numeric: Vec::new(),
            item_column: None,
            group_column: None,
            date_column: None,
            date_format: default_date_format(),
            delimiter: default_delimiter(),
            missing_tokens: default_missing_tokens(),
            zero_response_replacement: None,
        }
    }

    /// Spec matching the layout produced by [`write_csv`].
    pub fn for_export(schema: &AttributeSchema) -> Self {
        let mut spec = SchemaSpec::new(
            "response",
            schema.attributes().iter().map(|a| a.name.clone()).collect(),
        );
        spec.item_column = Some("item".into());
        spec.group_column = Some("group".into());
        spec
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Ok(serde_json::from_reader(file)?)
    }

    fn attribute_names(&self) -> Vec<&str> {
        self.attributes
            .iter()
            .map(String::as_str)
            .chain(self.numeric.iter().map(|n| n.column.as_str()))
            .collect()
    }
}

/// What to do with a test-set level the training schema has never seen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnseenPolicy {
    #[default]
    Error,
    RemapToMissing,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub role: Role,
    /// Training schema to extend (training role) or to score against (test role).
    pub base: Option<Arc<AttributeSchema>>,
    pub unseen: UnseenPolicy,
}

impl LoadOptions {
    pub fn training() -> Self {
        LoadOptions {
            role: Role::Training,
            base: None,
            unseen: UnseenPolicy::Error,
        }
    }

    pub fn test(schema: Arc<AttributeSchema>, unseen: UnseenPolicy) -> Self {
        LoadOptions {
            role: Role::Test,
            base: Some(schema),
            unseen,
        }
    }
}

/// Result of equal-frequency binning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Binning {
    /// Inclusive upper edge of every bin except the last.
    pub edges: Vec<f64>,
    /// Zero-based bin of each input value.
    pub assignments: Vec<usize>,
}

impl Binning {
    pub fn bins(&self) -> usize {
        self.edges.len() + 1
    }
}

/// Bin of `value` under `edges`. Values beyond the outer edges clamp to the
/// first or last bin.
pub fn assign_bin(edges: &[f64], value: f64) -> usize {
    edges.iter().position(|&e| value <= e).unwrap_or(edges.len())
}

/// Equal-frequency discretization. A run of tied values that straddles a
/// nominal cut is kept whole in the lower bin.
pub fn discretize_equal_frequency(values: &[f64], bins: usize) -> Result<Binning> {
    if values.is_empty() {
        return Err(EfmError::EmptyInput("no values to discretize".into()));
    }
    if bins < 2 {
        return Err(EfmError::Config(format!("bins must be at least 2, got {bins}")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(EfmError::Schema("cannot discretize non-finite values".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    // distinct values with cumulative counts
    let mut distinct: Vec<f64> = Vec::new();
    let mut cumulative: Vec<usize> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if distinct.last() == Some(&v) {
            *cumulative.last_mut().expect("non-empty") = i + 1;
        } else {
            distinct.push(v);
            cumulative.push(i + 1);
        }
    }
    if bins > distinct.len() {
        return Err(EfmError::DegenerateBinning {
            bins,
            distinct: distinct.len(),
        });
    }

    let n = sorted.len();
    let mut edges = Vec::with_capacity(bins - 1);
    let mut previous: Option<usize> = None;
    for b in 1..bins {
        let target = b * n / bins;
        let lowest = previous.map_or(0, |p| p + 1);
        // leave at least one distinct value for each remaining bin
        let highest = distinct.len() - 1 - (bins - b);
        let k = cumulative
            .iter()
            .position(|&c| c >= target)
            .unwrap_or(distinct.len() - 1)
            .clamp(lowest, highest);
        edges.push(distinct[k]);
        previous = Some(k);
    }
    let assignments = values.iter().map(|&v| assign_bin(&edges, v)).collect();
    Ok(Binning { edges, assignments })
}

fn bin_level_names(bins: usize) -> Vec<String> {
    (1..=bins).map(|b| format!("bin{b}")).collect()
}

/// Loads a CSV file described by `spec`.
pub fn load_csv(path: impl AsRef<Path>, spec: &SchemaSpec, options: &LoadOptions) -> Result<Dataset> {
    let file = File::open(path)?;
    load_csv_reader(file, spec, options)
}

/// Like [`load_csv`] but reads from any reader.
pub fn load_csv_reader<R: Read>(reader: R, spec: &SchemaSpec, options: &LoadOptions) -> Result<Dataset> {
    if !spec.delimiter.is_ascii() {
        return Err(EfmError::Config("delimiter must be an ASCII character".into()));
    }
    let mut csv_reader = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = csv_reader.headers()?.clone();
    let column = |name: &str, what: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| EfmError::Schema(format!("{what} column {name:?} not found in header")))
    };

    let response_col = column(&spec.response, "response")?;
    let attr_names = spec.attribute_names();
    let attr_cols = attr_names
        .iter()
        .map(|name| column(name, "attribute"))
        .collect::<Result<Vec<_>>>()?;
    let item_col = spec.item_column.as_deref().map(|c| column(c, "item")).transpose()?;
    let group_col = spec.group_column.as_deref().map(|c| column(c, "group")).transpose()?;
    let date_col = spec.date_column.as_deref().map(|c| column(c, "date")).transpose()?;
    let numeric_bins: Vec<Option<usize>> = attr_names
        .iter()
        .map(|name| spec.numeric.iter().find(|n| n.column == *name).map(|n| n.bins))
        .collect();

    let records = csv_reader.records().collect::<std::result::Result<Vec<_>, _>>()?;
    let is_missing = |cell: &str| spec.missing_tokens.iter().any(|t| t == cell.trim());
    let parse_number = |cell: &str, row: usize, what: &str| -> Result<f64> {
        cell.trim().parse::<f64>().map_err(|_| EfmError::Row {
            row,
            message: format!("{what} value {cell:?} is not numeric"),
        })
    };

    let mut schema = match (&options.base, options.role) {
        (Some(base), _) => {
            let base_names: Vec<&str> = base.attributes().iter().map(|a| a.name.as_str()).collect();
            if base_names != attr_names {
                return Err(EfmError::Schema(format!(
                    "attribute columns {attr_names:?} do not match the training schema {base_names:?}"
                )));
            }
            (**base).clone()
        }
        (None, Role::Test) => {
            return Err(EfmError::Schema("loading a test set requires the training schema".into()));
        }
        (None, Role::Training) => {
            let mut attributes = Vec::with_capacity(attr_names.len());
            for (c, name) in attr_names.iter().enumerate() {
                match numeric_bins[c] {
                    None => attributes.push(Attribute::categorical(*name, Vec::new())),
                    Some(bins) => {
                        let mut values = Vec::new();
                        for (r, record) in records.iter().enumerate() {
                            let cell = &record[attr_cols[c]];
                            if !is_missing(cell) {
                                values.push(parse_number(cell, r + 1, name)?);
                            }
                        }
                        let binning = discretize_equal_frequency(&values, bins)?;
                        attributes.push(Attribute {
                            name: name.to_string(),
                            levels: bin_level_names(binning.bins()),
                            bin_edges: Some(binning.edges),
                        });
                    }
                }
            }
            AttributeSchema::new(attributes)?
        }
    };

    let mut rows = Vec::with_capacity(records.len());
    for (r, record) in records.iter().enumerate() {
        let row_no = r + 1;
        let mut response = parse_number(&record[response_col], row_no, "response")?;
        if let Some(replacement) = spec.zero_response_replacement {
            if response <= 0.0 {
                response = replacement;
            }
        }
        if !(response.is_finite() && response > 0.0) {
            return Err(EfmError::Row {
                row: row_no,
                message: format!("response must be positive, found {response}"),
            });
        }

        let mut levels = Vec::with_capacity(attr_cols.len());
        for (c, &col) in attr_cols.iter().enumerate() {
            let cell = record[col].trim();
            let level = if is_missing(cell) {
                resolve_level(&mut schema, c, MISSING_LEVEL, options)?
            } else if let Some(edges) = schema.attribute(c).bin_edges.clone() {
                let value = parse_number(cell, row_no, &schema.attribute(c).name)?;
                assign_bin(&edges, value)
            } else {
                resolve_level(&mut schema, c, cell, options)?
            };
            levels.push(level);
        }

        let item = match item_col {
            Some(col) => record[col].trim().to_string(),
            None => row_no.to_string(),
        };
        let group = match group_col {
            Some(col) => record[col].trim().to_string(),
            None => "all".to_string(),
        };
        let date = match date_col {
            Some(col) => Some(NaiveDate::parse_from_str(record[col].trim(), &spec.date_format).map_err(
                |e| EfmError::Row {
                    row: row_no,
                    message: format!("bad date {:?}: {e}", &record[col]),
                },
            )?),
            None => None,
        };
        rows.push(Observation {
            key: RowKey { item, group },
            levels,
            response,
            date,
        });
    }
    // numeric attributes of a fresh schema may still lack their missing level
    Dataset::new(Arc::new(schema), rows, options.role)
}

fn resolve_level(schema: &mut AttributeSchema, c: usize, value: &str, options: &LoadOptions) -> Result<usize> {
    if let Some(j) = schema.attribute(c).level_index(value) {
        return Ok(j);
    }
    match options.role {
        Role::Training => Ok(schema.push_level(c, value)),
        Role::Test => {
            let unseen = || EfmError::UnseenLevel {
                attribute: schema.attribute(c).name.clone(),
                value: value.to_string(),
            };
            match options.unseen {
                UnseenPolicy::Error => Err(unseen()),
                UnseenPolicy::RemapToMissing => schema.attribute(c).missing_level().ok_or_else(unseen),
            }
        }
    }
}

/// Writes `data` as CSV with columns `item, group, <attributes...>, response`.
/// Missing levels are written as empty cells and responses with a
/// round-trip exact float format.
pub fn write_csv<W: Write>(data: &Dataset, writer: W) -> Result<()> {
    let schema = data.schema();
    let mut out = csv::Writer::from_writer(writer);
    let mut header = vec!["item".to_string(), "group".to_string()];
    header.extend(schema.attributes().iter().map(|a| a.name.clone()));
    header.push("response".into());
    out.write_record(&header)?;
    for row in data.rows() {
        let mut record = vec![row.key.item.clone(), row.key.group.clone()];
        for (c, &j) in row.levels.iter().enumerate() {
            let level = &schema.attribute(c).levels[j];
            record.push(if level == MISSING_LEVEL { String::new() } else { level.clone() });
        }
        record.push(format!("{}", row.response));
        out.write_record(&record)?;
    }
    out.flush()?;
    Ok(())
}
