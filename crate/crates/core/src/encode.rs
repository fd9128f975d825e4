//! Feature codec: min-max scaling to (-1, 1), noise-smoothed one-hot groups for
//! categoricals and labels, sin/cos pairs for cyclical columns.

use std::f64::consts::TAU;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{Cell, ClassId, ColumnKind, DataError, Dataset, Row, Schema};

pub const DEFAULT_GAMMA: f64 = 0.2;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("cannot fit a codec on an empty dataset")]
    EmptyDataset,
    #[error("continuous column `{0}` is constant; min must be below max")]
    ConstantColumn(String),
    #[error("gamma must lie in (0, 1), got {0}")]
    InvalidGamma(f64),
    #[error("value `{value}` of column `{column}` is not in the fitted vocabulary")]
    UnknownCategory { column: String, value: String },
    #[error("class {0} is not in the fitted label vocabulary")]
    UnknownClass(ClassId),
    #[error("encoded width mismatch: expected {expected}, found {found}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("dataset schema differs from the codec schema")]
    SchemaMismatch,
    #[error("invalid codec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Transform for one feature column together with the first slot it occupies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ColumnCodec {
    Continuous { start: usize, min: f64, max: f64 },
    Categorical { start: usize, vocab: Vec<String> },
    Cyclical { start: usize, period: u32 },
}

impl ColumnCodec {
    pub fn start(&self) -> usize {
        match self {
            ColumnCodec::Continuous { start, .. }
            | ColumnCodec::Categorical { start, .. }
            | ColumnCodec::Cyclical { start, .. } => *start,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            ColumnCodec::Continuous { .. } => 1,
            ColumnCodec::Categorical { vocab, .. } => vocab.len(),
            ColumnCodec::Cyclical { .. } => 2,
        }
    }

    pub fn slots(&self) -> Range<usize> {
        self.start()..self.start() + self.width()
    }
}

/// How a block of generator output slots must be squashed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotActivation {
    Tanh,
    Softmax,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub slots: Range<usize>,
    pub activation: SlotActivation,
}

#[derive(Deserialize)]
struct RawCodec {
    schema: Schema,
    columns: Vec<ColumnCodec>,
    label_vocab: Vec<ClassId>,
    gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCodec")]
pub struct Codec {
    schema: Schema,
    columns: Vec<ColumnCodec>,
    label_vocab: Vec<ClassId>,
    gamma: f64,
    #[serde(skip)]
    width: usize,
}

impl TryFrom<RawCodec> for Codec {
    type Error = CodecError;

    fn try_from(raw: RawCodec) -> Result<Self, CodecError> {
        Codec::from_parts(raw.schema, raw.columns, raw.label_vocab, raw.gamma)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedMatrix {
    /// n x feature_width.
    pub values: Array2<f64>,
    /// n x label_width, one (possibly smoothed) one-hot row per record.
    pub labels: Array2<f64>,
    pub class_ids: Vec<ClassId>,
}

impl EncodedMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }
}

impl Codec {
    fn from_parts(
        schema: Schema,
        columns: Vec<ColumnCodec>,
        label_vocab: Vec<ClassId>,
        gamma: f64,
    ) -> Result<Self, CodecError> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(CodecError::InvalidGamma(gamma));
        }
        if columns.len() != schema.n_features() {
            return Err(CodecError::Invalid(
                "one transform per feature column required".into(),
            ));
        }
        let mut next = 0;
        for (col, spec) in columns.iter().zip(schema.feature_columns()) {
            if col.start() != next {
                return Err(CodecError::Invalid(format!(
                    "slots of `{}` start at {} instead of {next}",
                    spec.name,
                    col.start()
                )));
            }
            let kind_ok = match (col, &spec.kind) {
                (ColumnCodec::Continuous { min, max, .. }, ColumnKind::Continuous) => {
                    if min >= max {
                        return Err(CodecError::ConstantColumn(spec.name.clone()));
                    }
                    true
                }
                (ColumnCodec::Categorical { vocab, .. }, ColumnKind::Categorical) => {
                    !vocab.is_empty()
                }
                (ColumnCodec::Cyclical { period, .. }, ColumnKind::Cyclical { period: p }) => {
                    period == p
                }
                _ => false,
            };
            if !kind_ok {
                return Err(CodecError::Invalid(format!(
                    "transform for `{}` does not match its schema kind",
                    spec.name
                )));
            }
            next += col.width();
        }
        if label_vocab.is_empty() {
            return Err(CodecError::Invalid("empty label vocabulary".into()));
        }
        Ok(Codec {
            schema,
            columns,
            label_vocab,
            gamma,
            width: next,
        })
    }

    /// Fits scaling ranges and vocabularies on `ds` only. Categorical vocabularies
    /// keep first-occurrence order; the label vocabulary is sorted by class id.
    pub fn fit(ds: &Dataset, gamma: f64) -> Result<Self, CodecError> {
        if ds.is_empty() {
            return Err(CodecError::EmptyDataset);
        }
        let schema = ds.schema().clone();
        let mut columns = Vec::with_capacity(schema.n_features());
        let mut start = 0;
        for (j, col) in schema.feature_columns().enumerate() {
            let codec = match col.kind {
                ColumnKind::Continuous => {
                    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
                    for row in ds.rows() {
                        let v = row.cells[j].as_num().expect("validated");
                        min = min.min(v);
                        max = max.max(v);
                    }
                    if min >= max {
                        return Err(CodecError::ConstantColumn(col.name.clone()));
                    }
                    ColumnCodec::Continuous { start, min, max }
                }
                ColumnKind::Categorical => {
                    let mut vocab: Vec<String> = Vec::new();
                    for row in ds.rows() {
                        let v = row.cells[j].as_cat().expect("validated");
                        if !vocab.iter().any(|x| x == v) {
                            vocab.push(v.to_string());
                        }
                    }
                    ColumnCodec::Categorical { start, vocab }
                }
                ColumnKind::Cyclical { period } => ColumnCodec::Cyclical { start, period },
                ColumnKind::Label => unreachable!("feature columns exclude the label"),
            };
            start += codec.width();
            columns.push(codec);
        }
        let mut label_vocab: Vec<ClassId> = ds.labels().collect();
        label_vocab.sort();
        label_vocab.dedup();
        Codec::from_parts(schema, columns, label_vocab, gamma)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CodecError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("codec serializes")
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn columns(&self) -> &[ColumnCodec] {
        &self.columns
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Encoded feature width (label slots excluded).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn label_vocab(&self) -> &[ClassId] {
        &self.label_vocab
    }

    pub fn label_width(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn class_index(&self, class: ClassId) -> Result<usize, CodecError> {
        self.label_vocab
            .iter()
            .position(|&c| c == class)
            .ok_or(CodecError::UnknownClass(class))
    }

    pub fn one_hot(&self, class: ClassId) -> Result<Vec<f64>, CodecError> {
        let mut v = vec![0.0; self.label_width()];
        v[self.class_index(class)?] = 1.0;
        Ok(v)
    }

    /// Maximal runs of tanh slots and one softmax segment per categorical group.
    pub fn segments(&self) -> Vec<Segment> {
        let mut out: Vec<Segment> = Vec::new();
        for col in &self.columns {
            let activation = match col {
                ColumnCodec::Categorical { .. } => SlotActivation::Softmax,
                _ => SlotActivation::Tanh,
            };
            match out.last_mut() {
                Some(last)
                    if activation == SlotActivation::Tanh
                        && last.activation == SlotActivation::Tanh =>
                {
                    last.slots.end = col.slots().end;
                }
                _ => out.push(Segment {
                    slots: col.slots(),
                    activation,
                }),
            }
        }
        out
    }

    /// Smoothed encoding: one-hot groups (categoricals and labels) get independent
    /// Uniform(0, gamma) noise on every slot and are renormalised to sum to 1.
    pub fn encode(&self, ds: &Dataset, seed: u64) -> Result<EncodedMatrix, CodecError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.encode_inner(ds, Some(&mut rng))
    }

    /// Noise-free encoding: exact one-hot groups.
    pub fn encode_plain(&self, ds: &Dataset) -> Result<EncodedMatrix, CodecError> {
        self.encode_inner(ds, None)
    }

    fn encode_inner(
        &self,
        ds: &Dataset,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<EncodedMatrix, CodecError> {
        if ds.schema() != &self.schema {
            return Err(CodecError::SchemaMismatch);
        }
        let n = ds.len();
        let mut values = Array2::zeros((n, self.width));
        let mut labels = Array2::zeros((n, self.label_width()));
        let mut class_ids = Vec::with_capacity(n);
        let gamma = self.gamma;
        let smooth = |slot: &mut [f64], hot: usize, rng: &mut Option<&mut ChaCha8Rng>| {
            slot[hot] = 1.0;
            if let Some(rng) = rng.as_deref_mut() {
                for s in slot.iter_mut() {
                    *s += rng.random_range(0.0..gamma);
                }
                let total: f64 = slot.iter().sum();
                slot.iter_mut().for_each(|s| *s /= total);
            }
        };
        for (i, row) in ds.rows().iter().enumerate() {
            let mut out = values.row_mut(i);
            let out = out.as_slice_mut().expect("standard layout");
            for (col, (cell, spec)) in self
                .columns
                .iter()
                .zip(row.cells.iter().zip(self.schema.feature_columns()))
            {
                match col {
                    ColumnCodec::Continuous { start, min, max } => {
                        let x = cell.as_num().expect("validated");
                        out[*start] = 2.0 * (x - min) / (max - min) - 1.0;
                    }
                    ColumnCodec::Categorical { start, vocab } => {
                        let v = cell.as_cat().expect("validated");
                        let hot = vocab.iter().position(|x| x == v).ok_or_else(|| {
                            CodecError::UnknownCategory {
                                column: spec.name.clone(),
                                value: v.to_string(),
                            }
                        })?;
                        smooth(&mut out[col.slots()], hot, &mut rng);
                        debug_assert_eq!(*start, col.slots().start);
                    }
                    ColumnCodec::Cyclical { start, period } => {
                        let h = cell.as_num().expect("validated");
                        let angle = TAU * h / f64::from(*period);
                        out[*start] = angle.sin();
                        out[*start + 1] = angle.cos();
                    }
                }
            }
            let hot = self.class_index(row.label)?;
            let mut lab = labels.row_mut(i);
            smooth(lab.as_slice_mut().expect("standard layout"), hot, &mut rng);
            class_ids.push(row.label);
        }
        Ok(EncodedMatrix {
            values,
            labels,
            class_ids,
        })
    }

    /// Inverts the encoding; labels are recovered by argmax of the label group.
    pub fn decode(&self, m: &EncodedMatrix) -> Result<Dataset, CodecError> {
        if m.labels.ncols() != self.label_width() {
            return Err(CodecError::WidthMismatch {
                expected: self.label_width(),
                found: m.labels.ncols(),
            });
        }
        let labels: Vec<ClassId> = m
            .labels
            .rows()
            .into_iter()
            .map(|r| self.label_vocab[argmax(r)])
            .collect();
        self.decode_features(&m.values, &labels)
    }

    /// Decodes feature slots and attaches the given class ids. Continuous slots
    /// are clipped to [-1, 1] first; cyclical pairs map back through atan2.
    pub fn decode_features(
        &self,
        values: &Array2<f64>,
        labels: &[ClassId],
    ) -> Result<Dataset, CodecError> {
        if values.ncols() != self.width {
            return Err(CodecError::WidthMismatch {
                expected: self.width,
                found: values.ncols(),
            });
        }
        if values.nrows() != labels.len() {
            return Err(CodecError::Invalid(format!(
                "{} encoded rows but {} labels",
                values.nrows(),
                labels.len()
            )));
        }
        let mut rows = Vec::with_capacity(labels.len());
        for (r, &label) in values.rows().into_iter().zip(labels) {
            self.class_index(label)?;
            let cells = self
                .columns
                .iter()
                .map(|col| match col {
                    ColumnCodec::Continuous { start, min, max } => {
                        let v = r[*start].clamp(-1.0, 1.0);
                        Cell::Num((v + 1.0) / 2.0 * (max - min) + min)
                    }
                    ColumnCodec::Categorical { start, vocab } => {
                        let group = r.slice(ndarray::s![*start..*start + vocab.len()]);
                        Cell::Cat(vocab[argmax(group)].clone())
                    }
                    ColumnCodec::Cyclical { start, period } => {
                        let p = f64::from(*period);
                        let mut h = r[*start].atan2(r[*start + 1]) / TAU * p;
                        if h < 0.0 {
                            h += p;
                        }
                        if h >= p {
                            h -= p;
                        }
                        Cell::Num(h)
                    }
                })
                .collect();
            rows.push(Row { cells, label });
        }
        Ok(Dataset::new(self.schema.clone(), rows)?)
    }
}

/// Index of the largest entry; the first one wins on ties.
pub fn argmax(v: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
