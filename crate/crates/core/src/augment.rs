//! Shared balancing contract for every augmenter.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::baselines::OversampleError;
use crate::dataio::{class_counts, write_csv, ClassId, DataError, Dataset};
use crate::encode::CodecError;
use crate::gan::GanError;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Oversample(#[from] OversampleError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("augmenter `{augmenter}` produced {found} rows of class {class}, expected {expected}")]
    Count {
        augmenter: String,
        class: ClassId,
        expected: usize,
        found: usize,
    },
}

/// Provenance tag written to the `origin` CSV column.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Real,
    Smote,
    Adasyn,
    ComfortGan,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Real => "real",
            Origin::Smote => "smote",
            Origin::Adasyn => "adasyn",
            Origin::ComfortGan => "comfortgan",
        }
    }
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub trait Augmenter: Send + Sync {
    fn name(&self) -> &str;

    fn origin(&self) -> Origin;

    /// Whether this augmenter fills deficits at all. The identity augmenter does not.
    fn adds_rows(&self) -> bool {
        true
    }

    /// Exactly `targets[c]` synthetic rows for every class `c`.
    fn generate(
        &self,
        train: &Dataset,
        targets: &BTreeMap<ClassId, usize>,
        seed: u64,
    ) -> Result<Dataset, AugmentError>;
}

/// Adds nothing; its efficacy is the baseline.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Augmenter for Identity {
    fn name(&self) -> &str {
        "none"
    }

    fn origin(&self) -> Origin {
        Origin::Real
    }

    fn adds_rows(&self) -> bool {
        false
    }

    fn generate(
        &self,
        train: &Dataset,
        _targets: &BTreeMap<ClassId, usize>,
        _seed: u64,
    ) -> Result<Dataset, AugmentError> {
        Ok(Dataset::empty(train.schema().clone()))
    }
}

/// Real rows first, verbatim, followed by the generated rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Balanced {
    pub data: Dataset,
    pub origin: Vec<Origin>,
    pub n_real: usize,
}

impl Balanced {
    pub fn real(&self) -> Dataset {
        self.data.select(&(0..self.n_real).collect::<Vec<_>>())
    }

    pub fn generated(&self) -> Dataset {
        self.data
            .select(&(self.n_real..self.data.len()).collect::<Vec<_>>())
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), DataError> {
        let tags: Vec<&str> = self.origin.iter().map(|o| o.as_str()).collect();
        write_csv(&self.data, Some(&tags), writer)
    }
}

/// Raises every class to the predominant-class count.
pub fn balance(
    train: &Dataset,
    augmenter: &dyn Augmenter,
    seed: u64,
) -> Result<Balanced, AugmentError> {
    let hist = class_counts(train);
    let targets: BTreeMap<ClassId, usize> = if augmenter.adds_rows() {
        hist.deficits()
    } else {
        hist.classes().into_iter().map(|c| (c, 0)).collect()
    };
    let generated = augmenter.generate(train, &targets, seed)?;
    let got = class_counts(&generated);
    for (&class, &expected) in &targets {
        if got.get(class) != expected {
            return Err(AugmentError::Count {
                augmenter: augmenter.name().to_string(),
                class,
                expected,
                found: got.get(class),
            });
        }
    }
    if got.total() != generated.len() || got.classes().iter().any(|c| !targets.contains_key(c)) {
        let class = got.classes().into_iter().find(|c| !targets.contains_key(c));
        return Err(AugmentError::Count {
            augmenter: augmenter.name().to_string(),
            class: class.unwrap_or(ClassId(0)),
            expected: 0,
            found: generated.len(),
        });
    }
    let data = train.concat(&generated)?;
    let mut origin = vec![Origin::Real; train.len()];
    origin.extend(std::iter::repeat_n(augmenter.origin(), generated.len()));
    Ok(Balanced {
        data,
        origin,
        n_real: train.len(),
    })
}
