//! Random forest of Gini CART trees with a fixed configuration.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataio::ClassId;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum ForestError {
    #[error("at least two classes are needed to fit a forest")]
    SingleClass,
    #[error("feature width mismatch: expected {expected}, found {found}")]
    Width { expected: usize, found: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("invalid forest configuration: {0}")]
    Config(&'static str),
    #[error("score of an empty prediction set")]
    Empty,
}

type Result<T> = std::result::Result<T, ForestError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Features examined per split; `None` means `ceil(sqrt(d))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 100,
            max_depth: 10,
            features_per_split: None,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(ForestError::Config("n_trees must be positive"));
        }
        if self.max_depth == 0 {
            return Err(ForestError::Config("max_depth must be positive"));
        }
        if self.features_per_split == Some(0) {
            return Err(ForestError::Config("features_per_split must be positive"));
        }
        Ok(())
    }

    fn features_for(&self, d: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (d as f64).sqrt().ceil() as usize)
            .clamp(1, d.max(1))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TreeNode {
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    /// Bootstrap rows per class index that reached this leaf.
    Leaf { counts: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

fn gini(counts: &[usize], n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let n = n as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / n).powi(2)).sum::<f64>()
}

fn majority(counts: &[usize]) -> usize {
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    best
}

struct Builder<'a> {
    x: &'a Array2<f64>,
    y: &'a [usize],
    n_classes: usize,
    max_depth: usize,
    k: usize,
    nodes: Vec<TreeNode>,
}

/// Best split of `rows` on `feature`: (weighted child impurity, threshold).
fn best_threshold(
    x: &Array2<f64>,
    y: &[usize],
    n_classes: usize,
    rows: &[usize],
    feature: usize,
) -> Option<(f64, f64)> {
    let mut sorted: Vec<(f64, usize)> = rows.iter().map(|&r| (x[[r, feature]], y[r])).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let mut right = vec![0usize; n_classes];
    for &(_, c) in &sorted {
        right[c] += 1;
    }
    let mut left = vec![0usize; n_classes];
    let mut best: Option<(f64, f64)> = None;
    for i in 0..n - 1 {
        let c = sorted[i].1;
        left[c] += 1;
        right[c] -= 1;
        let (a, b) = (sorted[i].0, sorted[i + 1].0);
        if a == b {
            continue;
        }
        let nl = i + 1;
        let impurity =
            (nl as f64 * gini(&left, nl) + (n - nl) as f64 * gini(&right, n - nl)) / n as f64;
        let threshold = a + (b - a) / 2.0;
        if best.is_none_or(|(bi, _)| impurity < bi) {
            best = Some((impurity, threshold));
        }
    }
    best
}

impl Builder<'_> {
    fn build<R: Rng>(&mut self, rows: Vec<usize>, depth: usize, rng: &mut R) -> usize {
        let mut counts = vec![0usize; self.n_classes];
        for &r in &rows {
            counts[self.y[r]] += 1;
        }
        let id = self.nodes.len();
        self.nodes.push(TreeNode::Leaf {
            counts: counts.clone(),
        });
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        if depth >= self.max_depth || pure || rows.len() < 2 {
            return id;
        }
        let mut features: Vec<usize> = (0..self.x.ncols()).collect();
        features.shuffle(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut examined = 0;
        for f in features {
            if examined == self.k {
                break;
            }
            let Some((impurity, threshold)) =
                best_threshold(self.x, self.y, self.n_classes, &rows, f)
            else {
                continue;
            };
            examined += 1;
            let better = match best {
                None => true,
                Some((bi, bf, bt)) => {
                    impurity < bi || (impurity == bi && (f < bf || (f == bf && threshold < bt)))
                }
            };
            if better {
                best = Some((impurity, f, threshold));
            }
        }
        let Some((_, feature, threshold)) = best else {
            return id;
        };
        let (l, r): (Vec<usize>, Vec<usize>) = rows
            .iter()
            .partition(|&&i| self.x[[i, feature]] <= threshold);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[id] = TreeNode::Split {
            feature,
            threshold,
            left,
            right,
        };
        id
    }
}

impl Tree {
    fn fit<R: Rng>(
        x: &Array2<f64>,
        y: &[usize],
        n_classes: usize,
        rows: Vec<usize>,
        max_depth: usize,
        k: usize,
        rng: &mut R,
    ) -> Tree {
        let mut b = Builder {
            x,
            y,
            n_classes,
            max_depth,
            k,
            nodes: Vec::new(),
        };
        b.build(rows, 0, rng);
        Tree { nodes: b.nodes }
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    fn leaf_of(&self, row: ndarray::ArrayView1<f64>) -> usize {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
            }
        }
    }

    /// Class index of the leaf majority.
    pub fn predict_row(&self, row: ndarray::ArrayView1<f64>) -> usize {
        match &self.nodes[self.leaf_of(row)] {
            TreeNode::Leaf { counts } => majority(counts),
            TreeNode::Split { .. } => unreachable!("leaf_of returns leaves"),
        }
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    classes: Vec<ClassId>,
    width: usize,
    trees: Vec<Tree>,
}

/// Bootstrap row indices of tree `t`, drawn from its own stream.
fn tree_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed::derive_indexed(seed, "tree", t as u64))
}

impl Forest {
    pub fn fit(x: &Array2<f64>, y: &[ClassId], cfg: &ForestConfig) -> Result<Forest> {
        cfg.validate()?;
        if x.nrows() != y.len() {
            return Err(ForestError::LengthMismatch {
                left: x.nrows(),
                right: y.len(),
            });
        }
        let classes: Vec<ClassId> = y
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if classes.len() < 2 {
            return Err(ForestError::SingleClass);
        }
        let yi: Vec<usize> = y
            .iter()
            .map(|c| classes.binary_search(c).expect("collected above"))
            .collect();
        let n = x.nrows();
        let k = cfg.features_for(x.ncols());
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = tree_rng(cfg.seed, t);
                let rows: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                Tree::fit(x, &yi, classes.len(), rows, cfg.max_depth, k, &mut rng)
            })
            .collect();
        Ok(Forest {
            classes,
            width: x.ncols(),
            trees,
        })
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Majority vote over trees; ties go to the smallest class id.
    pub fn predict(&self, x: &Array2<f64>) -> Result<Vec<ClassId>> {
        if x.ncols() != self.width {
            return Err(ForestError::Width {
                expected: self.width,
                found: x.ncols(),
            });
        }
        Ok(x.rows()
            .into_iter()
            .map(|row| {
                let mut votes = vec![0usize; self.classes.len()];
                for t in &self.trees {
                    votes[t.predict_row(row)] += 1;
                }
                self.classes[majority(&votes)]
            })
            .collect())
    }
}

/// Micro-averaged F1 from pooled true positives, false positives and false
/// negatives over all classes.
pub fn f1_micro(predicted: &[ClassId], actual: &[ClassId]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(ForestError::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(ForestError::Empty);
    }
    let classes: BTreeSet<ClassId> = predicted.iter().chain(actual).copied().collect();
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for c in classes {
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p == c, a == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
    }
    if tp == 0 {
        return Ok(0.0);
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

pub fn accuracy(predicted: &[ClassId], actual: &[ClassId]) -> Result<f64> {
    if predicted.len() != actual.len() {
        return Err(ForestError::LengthMismatch {
            left: predicted.len(),
            right: actual.len(),
        });
    }
    if actual.is_empty() {
        return Err(ForestError::Empty);
    }
    let hits = predicted.iter().zip(actual).filter(|(p, a)| p == a).count();
    Ok(hits as f64 / actual.len() as f64)
}
