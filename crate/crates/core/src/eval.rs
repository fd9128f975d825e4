//! Variability, diversity and machine-learning efficacy under a repeated,
//! seeded protocol.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{balance, AugmentError, Augmenter};
use crate::baselines::euclidean;
use crate::dataio::{
    class_counts, reduced_three_mapping, remap_classes, ClassId, DataError, Dataset,
};
use crate::encode::{Codec, CodecError, EncodedMatrix, DEFAULT_GAMMA};
use crate::forest::{f1_micro, Forest, ForestConfig, ForestError};
use crate::seed;

pub const DEFAULT_REPETITIONS: usize = 30;
pub const DEFAULT_DRAWS: usize = 30;
/// Variability below this fraction of the baseline raises the mode-collapse flag.
pub const MODE_COLLAPSE_FRACTION: f64 = 0.01;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {class} has {found} samples; variability needs at least 2")]
    TooFewSamples { class: ClassId, found: usize },
    #[error("{0} set is empty")]
    Empty(&'static str),
    #[error("{points} points but {labels} labels")]
    LengthMismatch { points: usize, labels: usize },
    #[error("unknown class scheme `{0}` (expected original or reduced3)")]
    UnknownScheme(String),
    #[error("repetitions and draws must be positive")]
    Config,
    #[error("could not start worker pool: {0}")]
    Pool(String),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Data(#[from] DataError),
}

type Result<T> = std::result::Result<T, EvalError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassScheme {
    Original,
    Reduced3,
}

impl ClassScheme {
    pub fn name(self) -> &'static str {
        match self {
            ClassScheme::Original => "original",
            ClassScheme::Reduced3 => "reduced3",
        }
    }

    /// Applies the scheme's label mapping.
    pub fn apply(self, ds: &Dataset) -> Result<Dataset> {
        match self {
            ClassScheme::Original => Ok(ds.clone()),
            ClassScheme::Reduced3 => {
                let mapping = reduced_three_mapping(&class_counts(ds).classes());
                Ok(remap_classes(ds, &mapping)?)
            }
        }
    }
}

impl fmt::Display for ClassScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ClassScheme {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(ClassScheme::Original),
            "reduced3" | "reduced-3" => Ok(ClassScheme::Reduced3),
            other => Err(EvalError::UnknownScheme(other.to_string())),
        }
    }
}

fn members(labels: &[ClassId]) -> BTreeMap<ClassId, Vec<usize>> {
    let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &c) in labels.iter().enumerate() {
        out.entry(c).or_default().push(i);
    }
    out
}

fn check_lengths(points: &Array2<f64>, labels: &[ClassId]) -> Result<()> {
    if points.nrows() != labels.len() {
        return Err(EvalError::LengthMismatch {
            points: points.nrows(),
            labels: labels.len(),
        });
    }
    Ok(())
}

/// Mean Euclidean distance between two samples drawn with replacement from
/// the same class, `draws` times per class in `classes`.
pub fn variability<R: Rng + ?Sized>(
    points: &Array2<f64>,
    labels: &[ClassId],
    classes: &[ClassId],
    draws: usize,
    rng: &mut R,
) -> Result<f64> {
    check_lengths(points, labels)?;
    if classes.is_empty() || draws == 0 {
        return Err(EvalError::Empty("variability class"));
    }
    let by_class = members(labels);
    let mut total = 0.0;
    for &class in classes {
        let rows = by_class.get(&class).map_or(&[][..], Vec::as_slice);
        if rows.len() < 2 {
            return Err(EvalError::TooFewSamples {
                class,
                found: rows.len(),
            });
        }
        for _ in 0..draws {
            let a = rows[rng.random_range(0..rows.len())];
            let b = rows[rng.random_range(0..rows.len())];
            total += euclidean(points.row(a), points.row(b));
        }
    }
    Ok(total / (classes.len() * draws) as f64)
}

/// Mean distance from a random query of each class to its nearest reference
/// row (any class). With `self_reference`, queries index into the reference
/// set and their own row is skipped.
pub fn diversity<R: Rng + ?Sized>(
    queries: &Array2<f64>,
    labels: &[ClassId],
    reference: &Array2<f64>,
    draws: usize,
    self_reference: bool,
    rng: &mut R,
) -> Result<f64> {
    check_lengths(queries, labels)?;
    if queries.nrows() == 0 {
        return Err(EvalError::Empty("generated"));
    }
    if reference.nrows() <= usize::from(self_reference) {
        return Err(EvalError::Empty("train"));
    }
    let by_class = members(labels);
    let mut total = 0.0;
    let mut count = 0usize;
    for rows in by_class.values() {
        for _ in 0..draws {
            let q = rows[rng.random_range(0..rows.len())];
            let best = reference
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(j, _)| !(self_reference && *j == q))
                .map(|(_, r)| euclidean(queries.row(q), r))
                .fold(f64::INFINITY, f64::min);
            total += best;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation (zero for a single value).
    pub std: f64,
    pub values: Vec<f64>,
}

impl MetricSummary {
    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        MetricSummary { mean, std, values }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRef {
    pub variability: f64,
    pub diversity: f64,
    pub efficacy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub augmenter: String,
    pub dataset: String,
    pub scheme: ClassScheme,
    pub repetitions: usize,
    /// `None` when the augmenter generated fewer than two rows in every class.
    pub variability: Option<MetricSummary>,
    /// `None` when the augmenter generated nothing.
    pub diversity: Option<MetricSummary>,
    pub efficacy: MetricSummary,
    pub baseline: BaselineRef,
    /// Efficacy minus baseline efficacy, in percentage points.
    pub efficacy_delta_pp: f64,
    pub mode_collapse: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub dataset: String,
    pub scheme: ClassScheme,
    pub classes: Vec<ClassId>,
    pub repetitions: usize,
    pub draws_per_class: usize,
    pub distance_space: String,
    pub nearest_neighbour_search: String,
    /// Baseline first, then one row per augmenter in the order given.
    pub rows: Vec<EvalReport>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub repetitions: usize,
    pub draws_per_class: usize,
    pub forest: ForestConfig,
    pub seed: u64,
    /// Worker threads for repetitions; 0 uses the global pool.
    pub jobs: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            repetitions: DEFAULT_REPETITIONS,
            draws_per_class: DEFAULT_DRAWS,
            forest: ForestConfig::default(),
            seed: 0,
            jobs: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Repetition {
    variability: Option<f64>,
    diversity: Option<f64>,
    efficacy: f64,
}

/// Shared split, codec and deterministic encodings for one comparison.
pub struct EvalContext {
    train: Dataset,
    codec: Codec,
    train_plain: EncodedMatrix,
    test_plain: EncodedMatrix,
    settings: EvalSettings,
}

impl EvalContext {
    /// The codec is fit on `train` only.
    pub fn new(train: Dataset, test: &Dataset, settings: EvalSettings) -> Result<Self> {
        if settings.repetitions == 0 || settings.draws_per_class == 0 {
            return Err(EvalError::Config);
        }
        if test.is_empty() {
            return Err(EvalError::Empty("test"));
        }
        let codec = Codec::fit(&train, DEFAULT_GAMMA)?;
        let train_plain = codec.encode_plain(&train)?;
        let test_plain = codec.encode_plain(test)?;
        Ok(EvalContext {
            train,
            codec,
            train_plain,
            test_plain,
            settings,
        })
    }

    pub fn codec(&self) -> &Codec {
        &self.codec
    }

    pub fn train(&self) -> &Dataset {
        &self.train
    }

    fn repetition_seed(&self, r: usize) -> u64 {
        seed::derive_indexed(self.settings.seed, "repetition", r as u64)
    }

    fn score(&self, x: &Array2<f64>, y: &[ClassId], rep_seed: u64) -> Result<f64> {
        let cfg = ForestConfig {
            seed: seed::derive(rep_seed, "forest"),
            ..self.settings.forest
        };
        let forest = Forest::fit(x, y, &cfg)?;
        let pred = forest.predict(&self.test_plain.values)?;
        Ok(f1_micro(&pred, &self.test_plain.class_ids)?)
    }

    fn baseline_repetition(&self, r: usize) -> Result<Repetition> {
        let rep_seed = self.repetition_seed(r);
        let enc = &self.train_plain;
        let classes: Vec<ClassId> = class_counts(&self.train).classes();
        let draws = self.settings.draws_per_class;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rep_seed, "variability"));
        let var = variability(&enc.values, &enc.class_ids, &classes, draws, &mut rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rep_seed, "diversity"));
        let div = diversity(
            &enc.values,
            &enc.class_ids,
            &enc.values,
            draws,
            true,
            &mut rng,
        )?;
        let efficacy = self.score(&enc.values, &enc.class_ids, rep_seed)?;
        Ok(Repetition {
            variability: Some(var),
            diversity: Some(div),
            efficacy,
        })
    }

    fn augmenter_repetition(&self, aug: &dyn Augmenter, r: usize) -> Result<Repetition> {
        let rep_seed = self.repetition_seed(r);
        let balanced = balance(&self.train, aug, seed::derive(rep_seed, "augment"))?;
        let all = self.codec.encode_plain(&balanced.data)?;
        let efficacy = self.score(&all.values, &all.class_ids, rep_seed)?;
        let generated = self.codec.encode_plain(&balanced.generated())?;
        let draws = self.settings.draws_per_class;
        let counts = class_counts(&balanced.generated());
        let pair_classes: Vec<ClassId> = counts
            .counts
            .iter()
            .filter(|(_, &n)| n >= 2)
            .map(|(&c, _)| c)
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rep_seed, "variability"));
        let var = if pair_classes.is_empty() {
            None
        } else {
            Some(variability(
                &generated.values,
                &generated.class_ids,
                &pair_classes,
                draws,
                &mut rng,
            )?)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(rep_seed, "diversity"));
        let div = if generated.n_rows() == 0 {
            None
        } else {
            Some(diversity(
                &generated.values,
                &generated.class_ids,
                &self.train_plain.values,
                draws,
                false,
                &mut rng,
            )?)
        };
        Ok(Repetition {
            variability: var,
            diversity: div,
            efficacy,
        })
    }

    fn run<F>(&self, f: F) -> Result<Vec<Repetition>>
    where
        F: Fn(usize) -> Result<Repetition> + Sync,
    {
        let reps = self.settings.repetitions;
        let go = || {
            (0..reps)
                .into_par_iter()
                .map(&f)
                .collect::<Result<Vec<_>>>()
        };
        if self.settings.jobs == 0 {
            return go();
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.settings.jobs)
            .build()
            .map_err(|e| EvalError::Pool(e.to_string()))?;
        pool.install(go)
    }

    /// Per-repetition efficacy of the forest on the raw training set.
    pub fn baseline_efficacy(&self) -> Result<Vec<f64>> {
        Ok(self
            .run(|r| {
                let rep_seed = self.repetition_seed(r);
                let efficacy = self.score(
                    &self.train_plain.values,
                    &self.train_plain.class_ids,
                    rep_seed,
                )?;
                Ok(Repetition {
                    variability: None,
                    diversity: None,
                    efficacy,
                })
            })?
            .into_iter()
            .map(|r| r.efficacy)
            .collect())
    }

    /// Per-repetition efficacy after balancing with `aug`.
    pub fn efficacy(&self, aug: &dyn Augmenter) -> Result<Vec<f64>> {
        Ok(self
            .run(|r| self.augmenter_repetition(aug, r))?
            .into_iter()
            .map(|r| r.efficacy)
            .collect())
    }

    /// Baseline row followed by one row per augmenter, all on shared seeds.
    pub fn compare(
        &self,
        dataset: &str,
        scheme: ClassScheme,
        augmenters: &[&dyn Augmenter],
    ) -> Result<ComparisonReport> {
        let base = self.run(|r| self.baseline_repetition(r))?;
        let summarize = |reps: &[Repetition], pick: fn(&Repetition) -> Option<f64>| {
            let v: Option<Vec<f64>> = reps.iter().map(pick).collect();
            v.map(MetricSummary::from_values)
        };
        let base_var = summarize(&base, |r| r.variability).expect("baseline variability");
        let base_div = summarize(&base, |r| r.diversity).expect("baseline diversity");
        let base_eff = MetricSummary::from_values(base.iter().map(|r| r.efficacy).collect());
        let baseline = BaselineRef {
            variability: base_var.mean,
            diversity: base_div.mean,
            efficacy: base_eff.mean,
        };
        let row = |name: &str, var: Option<MetricSummary>, div, eff: MetricSummary| EvalReport {
            augmenter: name.to_string(),
            dataset: dataset.to_string(),
            scheme,
            repetitions: self.settings.repetitions,
            mode_collapse: var.as_ref().is_some_and(|v: &MetricSummary| {
                v.mean < MODE_COLLAPSE_FRACTION * baseline.variability
            }),
            variability: var,
            diversity: div,
            efficacy_delta_pp: (eff.mean - baseline.efficacy) * 100.0,
            efficacy: eff,
            baseline,
        };
        let mut rows = vec![row(
            "baseline",
            Some(base_var.clone()),
            Some(base_div.clone()),
            base_eff,
        )];
        for aug in augmenters {
            let reps = self.run(|r| self.augmenter_repetition(*aug, r))?;
            let eff = MetricSummary::from_values(reps.iter().map(|r| r.efficacy).collect());
            rows.push(row(
                aug.name(),
                summarize(&reps, |r| r.variability),
                summarize(&reps, |r| r.diversity),
                eff,
            ));
        }
        Ok(ComparisonReport {
            dataset: dataset.to_string(),
            scheme,
            classes: self.codec.label_vocab().to_vec(),
            repetitions: self.settings.repetitions,
            draws_per_class: self.settings.draws_per_class,
            distance_space: "deterministic one-hot and min-max scaled features".into(),
            nearest_neighbour_search: "full train set, all classes".into(),
            rows,
        })
    }
}

fn cell(m: Option<&MetricSummary>) -> String {
    m.map_or_else(|| "-".to_string(), |m| format!("{:.2}", m.mean))
}

/// Plain-text table: one row per model with means and the efficacy delta.
pub fn render_table(report: &ComparisonReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "dataset: {}  scheme: {}  classes: {}  repetitions: {}",
        report.dataset,
        report.scheme,
        report.classes.len(),
        report.repetitions
    );
    let _ = writeln!(
        out,
        "{:<12} {:>12} {:>12} {:>18}",
        "model", "variability", "diversity", "ml efficacy"
    );
    for row in &report.rows {
        let eff = if row.augmenter == "baseline" {
            format!("{:.2}", row.efficacy.mean)
        } else {
            format!("{:.2}({:+.0}%)", row.efficacy.mean, row.efficacy_delta_pp)
        };
        let flag = if row.mode_collapse {
            "  mode collapse"
        } else {
            ""
        };
        let _ = writeln!(
            out,
            "{:<12} {:>12} {:>12} {:>18}{flag}",
            row.augmenter,
            cell(row.variability.as_ref()),
            cell(row.diversity.as_ref()),
            eff
        );
    }
    out
}
