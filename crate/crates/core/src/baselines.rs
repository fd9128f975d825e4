//! SMOTE and ADASYN oversampling in the encoded feature space.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Mutex, OnceLock};

use ndarray::{Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::augment::{AugmentError, Augmenter, Origin};
use crate::dataio::{ClassId, Dataset};
use crate::encode::{Codec, DEFAULT_GAMMA};
use crate::seed;

#[derive(Debug, Error)]
pub enum OversampleError {
    #[error("class {class} has {found} rows; at least 2 are needed to interpolate")]
    TooFewRows { class: ClassId, found: usize },
    #[error("k_neighbors must be at least 1")]
    InvalidK,
    #[error("{rows} encoded rows but {labels} labels")]
    LengthMismatch { rows: usize, labels: usize },
}

type Result<T> = std::result::Result<T, OversampleError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OversamplerConfig {
    pub k_neighbors: usize,
    pub seed: u64,
}

impl Default for OversamplerConfig {
    fn default() -> Self {
        OversamplerConfig {
            k_neighbors: 5,
            seed: 0,
        }
    }
}

/// How one synthetic row was made: `base + gap * (neighbor - base)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Draw {
    pub base: usize,
    pub neighbor: usize,
    pub gap: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Oversampled {
    pub values: Array2<f64>,
    pub labels: Vec<ClassId>,
    pub draws: Vec<Draw>,
}

/// ADASYN bookkeeping for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct Allocation {
    pub class: ClassId,
    /// Row indices of the class members, in data order.
    pub rows: Vec<usize>,
    /// Fraction of each member's k nearest neighbours (over all classes) that
    /// belong to another class.
    pub ratios: Vec<f64>,
    pub counts: Vec<usize>,
    /// Every ratio was zero and the needed rows were spread uniformly.
    pub fallback: bool,
}

pub fn euclidean(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// The `k` candidates nearest to row `query` (itself excluded), ordered by
/// distance then index.
fn nearest(data: &Array2<f64>, query: usize, candidates: &[usize], k: usize) -> Vec<usize> {
    let q = data.row(query);
    let mut d: Vec<(f64, usize)> = candidates
        .iter()
        .filter(|&&c| c != query)
        .map(|&c| (euclidean(q, data.row(c)), c))
        .collect();
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    d.truncate(k);
    d.into_iter().map(|(_, c)| c).collect()
}

/// Repeated runs (evaluation repetitions) would otherwise repeat the same warning.
fn warn_once(msg: String) {
    static SEEN: OnceLock<Mutex<BTreeSet<String>>> = OnceLock::new();
    let seen = SEEN.get_or_init(Default::default);
    if seen
        .lock()
        .map(|mut s| s.insert(msg.clone()))
        .unwrap_or(true)
    {
        log::warn!("{msg}");
    }
}

fn members_by_class(class_ids: &[ClassId]) -> BTreeMap<ClassId, Vec<usize>> {
    let mut out: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, &c) in class_ids.iter().enumerate() {
        out.entry(c).or_default().push(i);
    }
    out
}

/// Same-class neighbour lists, with `k` reduced to `members - 1` when needed.
fn class_neighbors(
    data: &Array2<f64>,
    class: ClassId,
    members: &[usize],
    k: usize,
) -> Result<BTreeMap<usize, Vec<usize>>> {
    if members.len() < 2 {
        return Err(OversampleError::TooFewRows {
            class,
            found: members.len(),
        });
    }
    let k_eff = k.min(members.len() - 1);
    if k_eff < k {
        warn_once(format!(
            "class {class}: k_neighbors reduced from {k} to {k_eff} ({} rows)",
            members.len()
        ));
    }
    Ok(members
        .iter()
        .map(|&i| (i, nearest(data, i, members, k_eff)))
        .collect())
}

fn validate(data: &Array2<f64>, class_ids: &[ClassId], cfg: &OversamplerConfig) -> Result<()> {
    if cfg.k_neighbors == 0 {
        return Err(OversampleError::InvalidK);
    }
    if data.nrows() != class_ids.len() {
        return Err(OversampleError::LengthMismatch {
            rows: data.nrows(),
            labels: class_ids.len(),
        });
    }
    Ok(())
}

fn interpolate<R: Rng>(
    data: &Array2<f64>,
    base: usize,
    neighbors: &[usize],
    rng: &mut R,
    out: &mut Vec<f64>,
) -> Draw {
    let neighbor = neighbors[rng.random_range(0..neighbors.len())];
    let gap: f64 = rng.random();
    let (x, n) = (data.row(base), data.row(neighbor));
    out.extend(x.iter().zip(n.iter()).map(|(&a, &b)| a + gap * (b - a)));
    Draw {
        base,
        neighbor,
        gap,
    }
}

fn finish(width: usize, flat: Vec<f64>, labels: Vec<ClassId>, draws: Vec<Draw>) -> Oversampled {
    let values = Array2::from_shape_vec((labels.len(), width), flat).expect("row-major buffer");
    Oversampled {
        values,
        labels,
        draws,
    }
}

/// Exactly `targets[c]` SMOTE rows for each class `c`.
pub fn smote(
    data: &Array2<f64>,
    class_ids: &[ClassId],
    targets: &BTreeMap<ClassId, usize>,
    cfg: &OversamplerConfig,
) -> Result<Oversampled> {
    validate(data, class_ids, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let by_class = members_by_class(class_ids);
    let (mut flat, mut labels, mut draws) = (Vec::new(), Vec::new(), Vec::new());
    for (&class, &needed) in targets {
        if needed == 0 {
            continue;
        }
        let members = by_class.get(&class).map_or(&[][..], Vec::as_slice);
        let neighbors = class_neighbors(data, class, members, cfg.k_neighbors)?;
        for _ in 0..needed {
            let base = members[rng.random_range(0..members.len())];
            draws.push(interpolate(
                data,
                base,
                &neighbors[&base],
                &mut rng,
                &mut flat,
            ));
            labels.push(class);
        }
    }
    Ok(finish(data.ncols(), flat, labels, draws))
}

/// Splits `needed` across rows in proportion to `ratios`. Rounds each share,
/// then gives the shortfall to the highest ratios (or takes the excess from the
/// lowest non-zero allocations). All-zero ratios fall back to a uniform split.
pub fn allocate(ratios: &[f64], needed: usize) -> (Vec<usize>, bool) {
    let m = ratios.len();
    if m == 0 {
        return (Vec::new(), false);
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        let counts = (0..m)
            .map(|i| needed / m + usize::from(i < needed % m))
            .collect();
        return (counts, true);
    }
    let share: Vec<f64> = ratios.iter().map(|r| r / total).collect();
    let mut counts: Vec<usize> = share
        .iter()
        .map(|s| (s * needed as f64).round() as usize)
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    let assigned: usize = counts.iter().sum();
    if assigned < needed {
        order.sort_by(|&a, &b| share[b].total_cmp(&share[a]).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(needed - assigned) {
            counts[i] += 1;
        }
    } else if assigned > needed {
        order.sort_by(|&a, &b| share[a].total_cmp(&share[b]).then(a.cmp(&b)));
        let mut excess = assigned - needed;
        while excess > 0 {
            for &i in &order {
                if excess > 0 && counts[i] > 0 {
                    counts[i] -= 1;
                    excess -= 1;
                }
            }
        }
    }
    (counts, false)
}

/// Density ratios and allocations for every class with a non-zero target.
pub fn adasyn_allocations(
    data: &Array2<f64>,
    class_ids: &[ClassId],
    targets: &BTreeMap<ClassId, usize>,
    cfg: &OversamplerConfig,
) -> Result<Vec<Allocation>> {
    validate(data, class_ids, cfg)?;
    let by_class = members_by_class(class_ids);
    let all: Vec<usize> = (0..data.nrows()).collect();
    let k_all = cfg.k_neighbors.min(data.nrows().saturating_sub(1)).max(1);
    let mut out = Vec::new();
    for (&class, &needed) in targets {
        if needed == 0 {
            continue;
        }
        let rows = by_class.get(&class).cloned().unwrap_or_default();
        if rows.len() < 2 {
            return Err(OversampleError::TooFewRows {
                class,
                found: rows.len(),
            });
        }
        let ratios: Vec<f64> = rows
            .iter()
            .map(|&i| {
                let nn = nearest(data, i, &all, k_all);
                let other = nn.iter().filter(|&&j| class_ids[j] != class).count();
                other as f64 / nn.len() as f64
            })
            .collect();
        let (counts, fallback) = allocate(&ratios, needed);
        if fallback {
            warn_once(format!(
                "class {class}: no other-class neighbours, allocating uniformly"
            ));
        }
        out.push(Allocation {
            class,
            rows,
            ratios,
            counts,
            fallback,
        });
    }
    Ok(out)
}

/// ADASYN: SMOTE-style interpolation with more rows drawn from members whose
/// neighbourhoods contain other classes.
pub fn adasyn(
    data: &Array2<f64>,
    class_ids: &[ClassId],
    targets: &BTreeMap<ClassId, usize>,
    cfg: &OversamplerConfig,
) -> Result<Oversampled> {
    let allocations = adasyn_allocations(data, class_ids, targets, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut flat, mut labels, mut draws) = (Vec::new(), Vec::new(), Vec::new());
    for a in &allocations {
        let neighbors = class_neighbors(data, a.class, &a.rows, cfg.k_neighbors)?;
        for (&base, &g) in a.rows.iter().zip(&a.counts) {
            for _ in 0..g {
                draws.push(interpolate(
                    data,
                    base,
                    &neighbors[&base],
                    &mut rng,
                    &mut flat,
                ));
                labels.push(a.class);
            }
        }
    }
    Ok(finish(data.ncols(), flat, labels, draws))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Smote,
    Adasyn,
}

/// Fits a codec on the training set, oversamples its smoothed encoding and
/// decodes the result.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Oversampler {
    method: Method,
    pub k_neighbors: usize,
}

impl Oversampler {
    pub fn smote(k_neighbors: usize) -> Self {
        Oversampler {
            method: Method::Smote,
            k_neighbors,
        }
    }

    pub fn adasyn(k_neighbors: usize) -> Self {
        Oversampler {
            method: Method::Adasyn,
            k_neighbors,
        }
    }
}

impl Augmenter for Oversampler {
    fn name(&self) -> &str {
        match self.method {
            Method::Smote => "smote",
            Method::Adasyn => "adasyn",
        }
    }

    fn origin(&self) -> Origin {
        match self.method {
            Method::Smote => Origin::Smote,
            Method::Adasyn => Origin::Adasyn,
        }
    }

    fn generate(
        &self,
        train: &Dataset,
        targets: &BTreeMap<ClassId, usize>,
        seed: u64,
    ) -> std::result::Result<Dataset, AugmentError> {
        if targets.values().all(|&n| n == 0) {
            return Ok(Dataset::empty(train.schema().clone()));
        }
        let codec = Codec::fit(train, DEFAULT_GAMMA)?;
        let enc = codec.encode(train, seed::derive(seed, "smoothing"))?;
        let cfg = OversamplerConfig {
            k_neighbors: self.k_neighbors,
            seed: seed::derive(seed, self.name()),
        };
        let out = match self.method {
            Method::Smote => smote(&enc.values, &enc.class_ids, targets, &cfg)?,
            Method::Adasyn => adasyn(&enc.values, &enc.class_ids, targets, &cfg)?,
        };
        Ok(codec.decode_features(&out.values, &out.labels)?)
    }
}
