//! Typed tabular datasets: schema, CSV loading/saving, relabelling and splitting.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Signed class id, e.g. -3..=3 on the 7-point thermal sensation scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub i32);

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("column `{0}` declared in schema is missing from the csv header")]
    MissingColumn(String),
    #[error("csv file is empty")]
    EmptyFile,
    #[error("no complete rows left after dropping {dropped} incomplete rows")]
    NoRows { dropped: usize },
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    Parse {
        line: u64,
        column: String,
        value: String,
    },
    #[error("line {line}: label `{value}` is not an integer class id (load with label rounding)")]
    NonIntegerLabel { line: u64, value: f64 },
    #[error("label value {0} is not finite")]
    NonFiniteLabel(f64),
    #[error("label value {0} is out of range for a class id")]
    LabelOutOfRange(f64),
    #[error("train fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("class {0} has no entry in the class mapping")]
    UnmappedClass(ClassId),
    #[error("row {row} does not match the schema: {reason}")]
    RowMismatch { row: usize, reason: String },
    #[error("datasets have different schemas")]
    SchemaMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnKind {
    Continuous,
    Categorical,
    Cyclical { period: u32 },
    Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    #[serde(flatten)]
    pub kind: ColumnKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit: Option<String>,
}

impl Column {
    pub fn new(name: impl Into<String>, kind: ColumnKind) -> Self {
        Column {
            name: name.into(),
            kind,
            unit: None,
        }
    }
}

#[derive(Deserialize)]
struct RawSchema {
    columns: Vec<Column>,
}

/// Ordered column declarations with exactly one label column.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct Schema {
    columns: Vec<Column>,
    #[serde(skip)]
    label_index: usize,
}

impl TryFrom<RawSchema> for Schema {
    type Error = DataError;

    fn try_from(raw: RawSchema) -> Result<Self, Self::Error> {
        Schema::new(raw.columns)
    }
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        let mut label_index = None;
        for (i, col) in columns.iter().enumerate() {
            if !seen.insert(col.name.as_str()) {
                return Err(DataError::InvalidSchema(format!(
                    "duplicate column name `{}`",
                    col.name
                )));
            }
            match col.kind {
                ColumnKind::Label => {
                    if label_index.replace(i).is_some() {
                        return Err(DataError::InvalidSchema(
                            "more than one label column".into(),
                        ));
                    }
                }
                ColumnKind::Cyclical { period: 0 } => {
                    return Err(DataError::InvalidSchema(format!(
                        "cyclical column `{}` needs a positive period",
                        col.name
                    )));
                }
                _ => {}
            }
        }
        let label_index =
            label_index.ok_or_else(|| DataError::InvalidSchema("no label column".into()))?;
        Ok(Schema {
            columns,
            label_index,
        })
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn label_column(&self) -> &Column {
        &self.columns[self.label_index]
    }

    /// Non-label columns in schema order; row cells follow this order.
    pub fn feature_columns(&self) -> impl Iterator<Item = &Column> + '_ {
        self.columns
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.label_index)
            .map(|(_, c)| c)
    }

    pub fn n_features(&self) -> usize {
        self.columns.len() - 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Cat(String),
}

impl Cell {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            Cell::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Cell::Cat(s) => Some(s),
            Cell::Num(_) => None,
        }
    }
}

impl fmt::Display for Cell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cell::Num(v) => write!(f, "{v}"),
            Cell::Cat(s) => f.write_str(s),
        }
    }
}

/// One record: feature cells in `Schema::feature_columns` order plus the class id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub cells: Vec<Cell>,
    pub label: ClassId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: Schema,
    rows: Vec<Row>,
}

impl Dataset {
    /// Validates every row against the schema. Empty datasets are allowed here
    /// (generators may legitimately emit zero rows); loaders reject them.
    pub fn new(schema: Schema, rows: Vec<Row>) -> Result<Self, DataError> {
        for (r, row) in rows.iter().enumerate() {
            if row.cells.len() != schema.n_features() {
                return Err(DataError::RowMismatch {
                    row: r,
                    reason: format!(
                        "expected {} feature cells, found {}",
                        schema.n_features(),
                        row.cells.len()
                    ),
                });
            }
            for (cell, col) in row.cells.iter().zip(schema.feature_columns()) {
                let ok = match (&col.kind, cell) {
                    (ColumnKind::Categorical, Cell::Cat(_)) => true,
                    (ColumnKind::Continuous | ColumnKind::Cyclical { .. }, Cell::Num(v)) => {
                        v.is_finite()
                    }
                    _ => false,
                };
                if !ok {
                    return Err(DataError::RowMismatch {
                        row: r,
                        reason: format!("bad cell {cell:?} for column `{}`", col.name),
                    });
                }
            }
        }
        Ok(Dataset { schema, rows })
    }

    pub fn empty(schema: Schema) -> Self {
        Dataset {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn rows(&self) -> &[Row] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Row> {
        self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn labels(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.rows.iter().map(|r| r.label)
    }

    /// Appends `other` after `self`; schemas must agree.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset, DataError> {
        if self.schema != other.schema {
            return Err(DataError::SchemaMismatch);
        }
        let mut rows = self.rows.clone();
        rows.extend_from_slice(&other.rows);
        Ok(Dataset {
            schema: self.schema.clone(),
            rows,
        })
    }

    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelPolicy {
    /// Labels must already be integral.
    #[default]
    Exact,
    /// Real-valued labels are rounded to the nearest integer, halves away from zero.
    Round,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadReport {
    pub retained: usize,
    pub dropped: usize,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell, "" | "NA" | "N/A" | "NaN" | "nan" | "null" | "NULL")
}

/// Rounds a real label to the nearest class id; exact halves go away from zero.
pub fn round_label(value: f64) -> Result<ClassId, DataError> {
    if !value.is_finite() {
        return Err(DataError::NonFiniteLabel(value));
    }
    let r = value.round();
    if r < i32::MIN as f64 || r > i32::MAX as f64 {
        return Err(DataError::LabelOutOfRange(value));
    }
    Ok(ClassId(r as i32))
}

pub fn round_labels(values: &[f64]) -> Result<Vec<ClassId>, DataError> {
    values.iter().map(|&v| round_label(v)).collect()
}

pub fn load_csv(
    path: impl AsRef<Path>,
    schema: &Schema,
    policy: LabelPolicy,
) -> Result<(Dataset, LoadReport), DataError> {
    let file = File::open(path)?;
    read_csv(file, schema, policy)
}

/// Reads a comma-separated table with a header row. Columns not named in the
/// schema are ignored; rows with a missing value in any schema column are dropped.
pub fn read_csv<R: Read>(
    reader: R,
    schema: &Schema,
    policy: LabelPolicy,
) -> Result<(Dataset, LoadReport), DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.is_empty() || (header.len() == 1 && header[0].is_empty()) {
        return Err(DataError::EmptyFile);
    }
    let mut positions = Vec::with_capacity(schema.columns().len());
    for col in schema.columns() {
        let pos = header
            .iter()
            .position(|h| h == col.name)
            .ok_or_else(|| DataError::MissingColumn(col.name.clone()))?;
        positions.push(pos);
    }

    let mut rows = Vec::new();
    let mut dropped = 0usize;
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let raw: Vec<&str> = positions
            .iter()
            .map(|&p| record.get(p).unwrap_or(""))
            .collect();
        if raw.iter().any(|c| is_missing(c)) {
            dropped += 1;
            continue;
        }
        let parse_num = |value: &str, column: &str| -> Result<f64, DataError> {
            value
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| DataError::Parse {
                    line,
                    column: column.to_string(),
                    value: value.to_string(),
                })
        };
        let mut cells = Vec::with_capacity(schema.n_features());
        let mut label = None;
        for (col, value) in schema.columns().iter().zip(&raw) {
            match col.kind {
                ColumnKind::Categorical => cells.push(Cell::Cat(value.to_string())),
                ColumnKind::Continuous | ColumnKind::Cyclical { .. } => {
                    cells.push(Cell::Num(parse_num(value, &col.name)?))
                }
                ColumnKind::Label => {
                    let v = parse_num(value, &col.name)?;
                    label = Some(match policy {
                        LabelPolicy::Round => round_label(v)?,
                        LabelPolicy::Exact if v.fract() == 0.0 => round_label(v)?,
                        LabelPolicy::Exact => {
                            return Err(DataError::NonIntegerLabel { line, value: v })
                        }
                    });
                }
            }
        }
        rows.push(Row {
            cells,
            label: label.expect("schema has a label column"),
        });
    }
    if rows.is_empty() {
        return Err(if dropped == 0 {
            DataError::EmptyFile
        } else {
            DataError::NoRows { dropped }
        });
    }
    let report = LoadReport {
        retained: rows.len(),
        dropped,
    };
    Ok((Dataset::new(schema.clone(), rows)?, report))
}

pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_csv(ds, None, File::create(path)?)
}

/// Writes the dataset in schema column order. When `origin` is given, an extra
/// trailing `origin` column carries one tag per row.
pub fn write_csv<W: Write>(
    ds: &Dataset,
    origin: Option<&[&str]>,
    writer: W,
) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_writer(writer);
    let mut header: Vec<&str> = ds
        .schema
        .columns()
        .iter()
        .map(|c| c.name.as_str())
        .collect();
    if origin.is_some() {
        header.push("origin");
    }
    wtr.write_record(&header)?;
    let label_index = ds.schema.label_index;
    for (i, row) in ds.rows.iter().enumerate() {
        let mut fields: Vec<String> = Vec::with_capacity(header.len());
        let mut cells = row.cells.iter();
        for c in 0..ds.schema.columns().len() {
            if c == label_index {
                fields.push(row.label.0.to_string());
            } else {
                fields.push(cells.next().expect("validated row").to_string());
            }
        }
        if let Some(tags) = origin {
            fields.push(tags[i].to_string());
        }
        wtr.write_record(&fields)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Seeded uniform shuffle, then the first `floor(n * fraction)` rows go to train.
pub fn train_test_split(
    ds: &Dataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), DataError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(DataError::InvalidFraction(train_fraction));
    }
    let mut idx: Vec<usize> = (0..ds.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ds.len() as f64 * train_fraction).floor() as usize;
    let (train, test) = idx.split_at(n_train);
    Ok((ds.select(train), ds.select(test)))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassHistogram {
    pub counts: BTreeMap<ClassId, usize>,
}

impl ClassHistogram {
    /// Class with the largest count; ties go to the smallest class id.
    pub fn predominant(&self) -> Option<ClassId> {
        let mut best: Option<(ClassId, usize)> = None;
        for (&c, &n) in &self.counts {
            if best.is_none_or(|(_, b)| n > b) {
                best = Some((c, n));
            }
        }
        best.map(|(c, _)| c)
    }

    pub fn predominant_count(&self) -> usize {
        self.counts.values().copied().max().unwrap_or(0)
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn get(&self, class: ClassId) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn classes(&self) -> Vec<ClassId> {
        self.counts.keys().copied().collect()
    }

    /// Rows each class needs to reach the predominant count.
    pub fn deficits(&self) -> BTreeMap<ClassId, usize> {
        let top = self.predominant_count();
        self.counts.iter().map(|(&c, &n)| (c, top - n)).collect()
    }

    pub fn is_uniform(&self) -> bool {
        let mut it = self.counts.values();
        match it.next() {
            Some(first) => it.all(|n| n == first),
            None => true,
        }
    }
}

impl fmt::Display for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, n) in &self.counts {
            writeln!(f, "{c:>4}: {n}")?;
        }
        Ok(())
    }
}

pub fn class_counts(ds: &Dataset) -> ClassHistogram {
    let mut counts = BTreeMap::new();
    for label in ds.labels() {
        *counts.entry(label).or_insert(0) += 1;
    }
    ClassHistogram { counts }
}

pub fn remap_classes(
    ds: &Dataset,
    mapping: &BTreeMap<ClassId, ClassId>,
) -> Result<Dataset, DataError> {
    let rows = ds
        .rows
        .iter()
        .map(|r| {
            let label = *mapping
                .get(&r.label)
                .ok_or(DataError::UnmappedClass(r.label))?;
            Ok(Row {
                cells: r.cells.clone(),
                label,
            })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(Dataset {
        schema: ds.schema.clone(),
        rows,
    })
}

/// Collapses a symmetric sensation scale to three classes: every negative id
/// becomes -1, every positive id +1, and 0 stays 0.
pub fn reduced_three_mapping(classes: &[ClassId]) -> BTreeMap<ClassId, ClassId> {
    classes
        .iter()
        .map(|&c| (c, ClassId(c.0.signum())))
        .collect()
}
