//! Shared builders and oracles for the integration tests.
#![allow(dead_code)]

use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use comfortgan::autodiff::{Mode, Tape, Tensor, Var};
use comfortgan::dataio::{Cell, ClassId, Column, ColumnKind, Dataset, Row, Schema};
use comfortgan::encode::{argmax, Codec, ColumnCodec};
use comfortgan::gan::{gradient_penalty, gradient_penalty_with};
use comfortgan::nn::CriticNet;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_tensor<R: Rng>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Tensor {
    Array2::from_shape_fn((rows, cols), |_| {
        sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    })
}

/// Schema with `d` continuous features `f0..` and a label column.
pub fn continuous_schema(d: usize) -> Schema {
    let mut cols: Vec<Column> = (0..d)
        .map(|i| Column::new(format!("f{i}"), ColumnKind::Continuous))
        .collect();
    cols.push(Column::new("label", ColumnKind::Label));
    Schema::new(cols).unwrap()
}

/// Isotropic Gaussian clusters, `counts[k]` rows of class `k` around `means[k]`.
pub fn gaussian_mixture(counts: &[usize], means: &[Vec<f64>], sd: f64, seed: u64) -> Dataset {
    let d = means[0].len();
    let mut r = rng(seed);
    let noise = Normal::new(0.0, sd).unwrap();
    let mut rows = Vec::new();
    for (k, (&n, mean)) in counts.iter().zip(means).enumerate() {
        for _ in 0..n {
            rows.push(Row {
                cells: mean
                    .iter()
                    .map(|m| Cell::Num(m + noise.sample(&mut r)))
                    .collect(),
                label: ClassId(k as i32),
            });
        }
    }
    rows.shuffle(&mut r);
    Dataset::new(continuous_schema(d), rows).unwrap()
}

/// A dataset with mixed feature kinds and exactly `counts[c]` rows of class `c`.
pub fn mixed_dataset(counts: &BTreeMap<ClassId, usize>, seed: u64) -> Dataset {
    let schema = Schema::new(vec![
        Column::new("temp", ColumnKind::Continuous),
        Column::new("hour", ColumnKind::Cyclical { period: 24 }),
        Column::new("sex", ColumnKind::Categorical),
        Column::new("label", ColumnKind::Label),
    ])
    .unwrap();
    let mut r = rng(seed);
    let mut rows = Vec::new();
    for (&class, &n) in counts {
        for _ in 0..n {
            rows.push(Row {
                cells: vec![
                    Cell::Num(15.0 + 2.0 * class.0 as f64 + r.random_range(0.0..5.0)),
                    Cell::Num(r.random_range(0..24) as f64),
                    Cell::Cat(["F", "M"][r.random_range(0..2)].to_string()),
                ],
                label: class,
            });
        }
    }
    Dataset::new(schema, rows).unwrap()
}

pub fn row_hash(row: &Row) -> u64 {
    let mut h = DefaultHasher::new();
    row.label.hash(&mut h);
    for c in &row.cells {
        match c {
            Cell::Num(v) => (0u8, v.to_bits()).hash(&mut h),
            Cell::Cat(s) => (1u8, s).hash(&mut h),
        }
    }
    h.finish()
}

// Random schemas and datasets for codec round trips.

type CellGen = Box<dyn Fn(&mut ChaCha8Rng) -> Cell>;

/// 1-6 feature columns of random kinds, 2-40 rows, 2-5 classes. Continuous
/// columns are never constant and every class appears.
pub fn random_dataset(seed: u64) -> Dataset {
    let mut r = rng(seed);
    let n_features = r.random_range(1..=6);
    let mut cols = Vec::new();
    let mut gens: Vec<CellGen> = Vec::new();
    for i in 0..n_features {
        match r.random_range(0..3) {
            0 => {
                let lo: f64 = r.random_range(-1e3..1e3);
                let span: f64 = 10f64.powf(r.random_range(-2.0..3.0));
                cols.push(Column::new(format!("c{i}"), ColumnKind::Continuous));
                gens.push(Box::new(move |r| Cell::Num(lo + span * r.random::<f64>())));
            }
            1 => {
                let k = r.random_range(1..=5);
                cols.push(Column::new(format!("k{i}"), ColumnKind::Categorical));
                gens.push(Box::new(move |r| {
                    Cell::Cat(format!("v{}", r.random_range(0..k)))
                }));
            }
            _ => {
                let period = [7u32, 12, 24, 60, 365][r.random_range(0..5)];
                cols.push(Column::new(
                    format!("y{i}"),
                    ColumnKind::Cyclical { period },
                ));
                gens.push(Box::new(move |r| {
                    Cell::Num(r.random_range(0.0..period as f64))
                }));
            }
        }
    }
    let label_at = r.random_range(0..=n_features);
    cols.insert(label_at, Column::new("label", ColumnKind::Label));
    let n_classes = r.random_range(2..=5);
    let n_rows = r.random_range(n_classes.max(2)..=40);
    let mut rows: Vec<Row> = (0..n_rows)
        .map(|i| Row {
            cells: gens.iter().map(|g| g(&mut r)).collect(),
            label: ClassId(if i < n_classes {
                i - 2
            } else {
                r.random_range(0..n_classes) - 2
            }),
        })
        .collect();
    // Pin each continuous column's extremes on two rows so no column is constant.
    for (j, g) in gens.iter().enumerate() {
        if let (Cell::Num(a), Cell::Num(b)) = (&rows[0].cells[j], &rows[1].cells[j]) {
            if a == b {
                let bumped = g(&mut r);
                rows[1].cells[j] = match bumped {
                    Cell::Num(v) if v != *a => Cell::Num(v),
                    _ => Cell::Num(a + 1.0),
                };
            }
        }
    }
    Dataset::new(Schema::new(cols).unwrap(), rows).unwrap()
}

fn cyclic_gap(a: f64, b: f64, period: f64) -> f64 {
    let d = (a - b).rem_euclid(period);
    d.min(period - d)
}

/// Checks the encoded invariants and the decode round trip for one dataset.
pub fn check_codec_round_trip(ds: &Dataset, seed: u64) -> Result<(), String> {
    let codec = Codec::fit(ds, 0.2).map_err(|e| e.to_string())?;
    let enc = codec.encode(ds, seed).map_err(|e| e.to_string())?;
    if enc.values.ncols() != codec.width() {
        return Err("encoded width differs from codec width".into());
    }
    for (i, row) in ds.rows().iter().enumerate() {
        let v = enc.values.row(i);
        for (j, col) in codec.columns().iter().enumerate() {
            match col {
                ColumnCodec::Continuous { start, .. } => {
                    if !(-1.0..=1.0).contains(&v[*start]) {
                        return Err(format!(
                            "row {i} continuous slot {} out of range",
                            v[*start]
                        ));
                    }
                }
                ColumnCodec::Categorical { start, vocab } => {
                    let g = v.slice(ndarray::s![*start..*start + vocab.len()]);
                    if g.iter().any(|&x| x < 0.0) || (g.sum() - 1.0).abs() > 1e-12 {
                        return Err(format!("row {i} categorical group {g} not a distribution"));
                    }
                    let want = row.cells[j].as_cat().unwrap();
                    if vocab[argmax(g)] != want {
                        return Err(format!("row {i} smoothed argmax lost `{want}`"));
                    }
                }
                ColumnCodec::Cyclical { start, .. } => {
                    let (s, c) = (v[*start], v[*start + 1]);
                    if (s * s + c * c - 1.0).abs() > 1e-9 {
                        return Err(format!("row {i} cyclical pair off the unit circle"));
                    }
                }
            }
        }
        let l = enc.labels.row(i);
        if (l.sum() - 1.0).abs() > 1e-12 || codec.label_vocab()[argmax(l)] != row.label {
            return Err(format!("row {i} smoothed label lost its class"));
        }
    }
    let back = codec.decode(&enc).map_err(|e| e.to_string())?;
    if back.len() != ds.len() || back.schema() != ds.schema() {
        return Err("decoded shape differs".into());
    }
    for (i, (a, b)) in ds.rows().iter().zip(back.rows()).enumerate() {
        if a.label != b.label {
            return Err(format!("row {i} label {} decoded as {}", a.label, b.label));
        }
        for (col, (x, y)) in ds
            .schema()
            .feature_columns()
            .zip(a.cells.iter().zip(&b.cells))
        {
            let ok = match (&col.kind, x, y) {
                (ColumnKind::Continuous, Cell::Num(x), Cell::Num(y)) => {
                    (x - y).abs() <= 1e-9 * x.abs().max(1.0)
                }
                (ColumnKind::Cyclical { period }, Cell::Num(x), Cell::Num(y)) => {
                    cyclic_gap(*x, *y, *period as f64) <= 1e-6
                }
                (ColumnKind::Categorical, Cell::Cat(x), Cell::Cat(y)) => x == y,
                _ => false,
            };
            if !ok {
                return Err(format!("row {i} column `{}`: {x} decoded as {y}", col.name));
            }
        }
    }
    Ok(())
}

// Gradient checking.

/// Error of an analytic derivative against a finite difference, relative to
/// the larger magnitude with a floor of 1e-3 so that near-zero derivatives are
/// compared absolutely.
pub fn grad_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Clone, Copy, Debug)]
pub enum Act {
    Relu,
    Leaky,
    Tanh,
}

#[derive(Clone, Debug)]
pub struct MlpSpec {
    /// Input width, then each layer's output width.
    pub widths: Vec<usize>,
    pub acts: Vec<Act>,
    pub batch_norm: Vec<bool>,
    pub dropout: Option<f64>,
    pub softmax_out: bool,
    pub batch: usize,
}

impl MlpSpec {
    pub fn random<R: Rng>(rng: &mut R) -> Self {
        let layers = rng.random_range(1..=5);
        let widths: Vec<usize> = (0..=layers).map(|_| rng.random_range(1..=64)).collect();
        let acts = (0..layers)
            .map(|_| [Act::Relu, Act::Leaky, Act::Tanh][rng.random_range(0..3)])
            .collect();
        let batch = rng.random_range(2..=6);
        let batch_norm = (0..layers).map(|_| rng.random_bool(0.3)).collect();
        MlpSpec {
            widths,
            acts,
            batch_norm,
            dropout: rng.random_bool(0.3).then_some(0.3),
            softmax_out: rng.random_bool(0.3),
            batch,
        }
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Weight, bias and (with batch norm) scale and shift per layer.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Vec<Tensor> {
        let mut p = Vec::new();
        for l in 0..self.layers() {
            let (i, o) = (self.widths[l], self.widths[l + 1]);
            p.push(normal_tensor(i, o, 1.0 / (i as f64).sqrt(), rng));
            p.push(normal_tensor(1, o, 0.1, rng));
            if self.batch_norm[l] {
                p.push(normal_tensor(1, o, 0.2, rng).mapv(|v| v + 1.0));
                p.push(normal_tensor(1, o, 0.1, rng));
            }
        }
        p
    }

    /// Hidden layers use the drawn activation; the last layer is linear
    /// (optionally softmax). Dropout masks come from `mask_seed`.
    pub fn forward(&self, tape: &mut Tape, x: Var, params: &[Var], mask_seed: u64) -> Var {
        let mut masks = rng(mask_seed);
        let mut h = x;
        let mut k = 0;
        for l in 0..self.layers() {
            h = tape.matmul(h, params[k]).unwrap();
            h = tape.add_bias(h, params[k + 1]).unwrap();
            k += 2;
            if self.batch_norm[l] {
                h = tape
                    .batch_norm_train(h, params[k], params[k + 1], 1e-5)
                    .unwrap()
                    .0;
                k += 2;
            }
            if l + 1 < self.layers() {
                h = match self.acts[l] {
                    Act::Relu => tape.relu(h),
                    Act::Leaky => tape.leaky_relu(h, 0.2),
                    Act::Tanh => tape.tanh(h),
                }
                .unwrap();
                if let Some(rate) = self.dropout {
                    h = tape.dropout(h, rate, Mode::Train, &mut masks).unwrap();
                }
            }
        }
        if self.softmax_out {
            h = tape.softmax_rows(h).unwrap();
        }
        h
    }
}

/// `mean(out * target) + mean(out^2)`.
fn mlp_loss(
    spec: &MlpSpec,
    x: &Tensor,
    target: &Tensor,
    params: &[Tensor],
    with_grad: bool,
    mask_seed: u64,
) -> (f64, Vec<Tensor>, Tensor) {
    let mut tape = Tape::new();
    let xv = if with_grad {
        tape.input(x.clone()).unwrap()
    } else {
        tape.constant(x.clone()).unwrap()
    };
    let pv: Vec<Var> = params
        .iter()
        .map(|p| {
            if with_grad {
                tape.input(p.clone()).unwrap()
            } else {
                tape.constant(p.clone()).unwrap()
            }
        })
        .collect();
    let out = spec.forward(&mut tape, xv, &pv, mask_seed);
    let t = tape.constant(target.clone()).unwrap();
    let prod = tape.mul(out, t).unwrap();
    let a = tape.mean(prod).unwrap();
    let sq = tape.square(out).unwrap();
    let b = tape.mean(sq).unwrap();
    let loss = tape.add(a, b).unwrap();
    let value = tape.scalar(loss);
    if !with_grad {
        return (value, Vec::new(), Array2::zeros((0, 0)));
    }
    let g = tape.backward(loss).unwrap();
    let zeros = |v: Var| Array2::zeros(tape.shape(v));
    let pg = pv
        .iter()
        .map(|&v| g.get(v).cloned().unwrap_or_else(|| zeros(v)))
        .collect();
    let xg = g.get(xv).cloned().unwrap_or_else(|| zeros(xv));
    (value, pg, xg)
}

/// Sampled entries (at most `per_tensor` from each tensor).
fn probe_entries<R: Rng>(t: &Tensor, per_tensor: usize, rng: &mut R) -> Vec<(usize, usize)> {
    let mut all: Vec<(usize, usize)> = (0..t.nrows())
        .flat_map(|i| (0..t.ncols()).map(move |j| (i, j)))
        .collect();
    all.shuffle(rng);
    all.truncate(per_tensor);
    all
}

const FD_STEP: f64 = 1e-5;

/// Worst gradient error over sampled parameter and input entries of a random MLP.
pub fn mlp_grad_check(seed: u64) -> (MlpSpec, f64) {
    let mut r = rng(seed);
    let spec = MlpSpec::random(&mut r);
    let params = spec.init(&mut r);
    let x = normal_tensor(spec.batch, spec.widths[0], 1.0, &mut r);
    let target = normal_tensor(spec.batch, *spec.widths.last().unwrap(), 1.0, &mut r);
    let mask_seed = r.random();
    let (_, pg, xg) = mlp_loss(&spec, &x, &target, &params, true, mask_seed);
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        for (i, j) in probe_entries(p, 6, &mut r) {
            let mut plus = params.clone();
            plus[k][[i, j]] += FD_STEP;
            let mut minus = params.clone();
            minus[k][[i, j]] -= FD_STEP;
            let fp = mlp_loss(&spec, &x, &target, &plus, false, mask_seed).0;
            let fm = mlp_loss(&spec, &x, &target, &minus, false, mask_seed).0;
            worst = worst.max(grad_error(pg[k][[i, j]], (fp - fm) / (2.0 * FD_STEP)));
        }
    }
    for (i, j) in probe_entries(&x, 6, &mut r) {
        let mut plus = x.clone();
        plus[[i, j]] += FD_STEP;
        let mut minus = x.clone();
        minus[[i, j]] -= FD_STEP;
        let fp = mlp_loss(&spec, &plus, &target, &params, false, mask_seed).0;
        let fm = mlp_loss(&spec, &minus, &target, &params, false, mask_seed).0;
        worst = worst.max(grad_error(xg[[i, j]], (fp - fm) / (2.0 * FD_STEP)));
    }
    (spec, worst)
}

/// Gradient penalty of a random smooth-or-leaky MLP critic (no batch norm, no
/// softmax), differentiated with respect to its parameters.
pub fn mlp_gp_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut spec = MlpSpec::random(&mut r);
    let last = spec.layers();
    spec.widths[last] = 1;
    spec.batch_norm.iter_mut().for_each(|b| *b = false);
    spec.softmax_out = false;
    let params = spec.init(&mut r);
    let real = normal_tensor(spec.batch, spec.widths[0], 1.0, &mut r);
    let fake = normal_tensor(spec.batch, spec.widths[0], 1.0, &mut r);
    let eps: Vec<f64> = (0..spec.batch).map(|_| r.random()).collect();
    let mask_seed = r.random();
    let lambda = 10.0;
    let eval = |params: &[Tensor], with_grad: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let pv: Vec<Var> = params
            .iter()
            .map(|p| {
                if with_grad {
                    tape.input(p.clone()).unwrap()
                } else {
                    tape.constant(p.clone()).unwrap()
                }
            })
            .collect();
        let gp = gradient_penalty_with(&mut tape, &real, &fake, &eps, lambda, |t, x| {
            Ok(spec.forward(t, x, &pv, mask_seed))
        })
        .unwrap();
        let v = tape.scalar(gp);
        if !with_grad {
            return (v, Vec::new());
        }
        let g = tape.backward(gp).unwrap();
        let grads = pv
            .iter()
            .map(|&p| {
                g.get(p)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(tape.shape(p)))
            })
            .collect();
        (v, grads)
    };
    let (_, grads) = eval(&params, true);
    let mut worst: f64 = 0.0;
    for (k, p) in params.iter().enumerate() {
        for (i, j) in probe_entries(p, 6, &mut r) {
            let mut plus = params.clone();
            plus[k][[i, j]] += FD_STEP;
            let mut minus = params.clone();
            minus[k][[i, j]] -= FD_STEP;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(grad_error(grads[k][[i, j]], num));
        }
    }
    worst
}

/// Gradient penalty of the production critic (dropout active, fixed masks),
/// differentiated with respect to every parameter tensor.
pub fn critic_gp_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (features, labels, batch) = (r.random_range(2..=8), r.random_range(2..=4), 4);
    let critic = CriticNet::new(features, labels, r.random());
    let real = normal_tensor(batch, features, 0.5, &mut r);
    let fake = normal_tensor(batch, features, 0.5, &mut r);
    let y = Array2::from_shape_fn((batch, labels), |(i, j)| {
        f64::from(u8::from(i % labels == j))
    });
    let run_seed: u64 = r.random();
    let eval = |c: &CriticNet, with_grad: bool| -> (f64, Vec<Tensor>) {
        let mut tape = Tape::new();
        let vars = if with_grad {
            c.params.bind(&mut tape).unwrap()
        } else {
            c.params.bind_constant(&mut tape).unwrap()
        };
        let yv = tape.constant(y.clone()).unwrap();
        let mut run = rng(run_seed);
        let gp = gradient_penalty(
            &mut tape,
            c,
            &vars,
            &real,
            &fake,
            yv,
            10.0,
            Mode::Train,
            &mut run,
        )
        .unwrap();
        let v = tape.scalar(gp);
        if !with_grad {
            return (v, Vec::new());
        }
        let g = tape.backward(gp).unwrap();
        (v, c.params.collect_grads(&vars, &g))
    };
    let (_, grads) = eval(&critic, true);
    let mut worst: f64 = 0.0;
    for (k, (tensor, grad)) in critic.params.tensors().iter().zip(&grads).enumerate() {
        for (i, j) in probe_entries(tensor, 4, &mut r) {
            let mut plus = critic.clone();
            plus.params.tensors_mut()[k][[i, j]] += FD_STEP;
            let mut minus = critic.clone();
            minus.params.tensors_mut()[k][[i, j]] -= FD_STEP;
            let num = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * FD_STEP);
            worst = worst.max(grad_error(grad[[i, j]], num));
        }
    }
    worst
}

/// Penalty of the linear critic `x -> x w` on random data.
pub fn linear_critic_penalty(w: &[f64], lambda: f64) -> f64 {
    let mut r = rng(11);
    let d = w.len();
    let real = normal_tensor(16, d, 1.0, &mut r);
    let fake = normal_tensor(16, d, 1.0, &mut r);
    let eps: Vec<f64> = (0..16).map(|_| r.random()).collect();
    let mut tape = Tape::new();
    let wv = tape
        .input(Array2::from_shape_vec((d, 1), w.to_vec()).unwrap())
        .unwrap();
    let gp = gradient_penalty_with(&mut tape, &real, &fake, &eps, lambda, |t, x| {
        Ok(t.matmul(x, wv)?)
    })
    .unwrap();
    tape.scalar(gp)
}

// Oversampling oracles.

/// Random encoded points in 1-6 dimensions with 2-4 classes of 2-30 rows each,
/// and random positive targets.
pub fn oversampling_instance(
    seed: u64,
) -> (Array2<f64>, Vec<ClassId>, BTreeMap<ClassId, usize>, usize) {
    let mut r = rng(seed);
    let d = r.random_range(1..=6);
    let n_classes = r.random_range(2..=4);
    let mut labels = Vec::new();
    let mut targets = BTreeMap::new();
    for c in 0..n_classes {
        let n = r.random_range(2..=30);
        labels.extend(std::iter::repeat_n(ClassId(c), n));
        targets.insert(ClassId(c), r.random_range(0..=60));
    }
    labels.shuffle(&mut r);
    let x = normal_tensor(labels.len(), d, 1.0, &mut r);
    let k = r.random_range(1..=7);
    (x, labels, targets, k)
}

fn dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Every synthetic row lies on the segment between its base and a same-class
/// neighbour, and per-class counts equal the targets.
pub fn check_smote(seed: u64) -> Result<(), String> {
    use comfortgan::baselines::{smote, OversamplerConfig};
    let (x, labels, targets, k) = oversampling_instance(seed);
    let out = smote(
        &x,
        &labels,
        &targets,
        &OversamplerConfig {
            k_neighbors: k,
            seed,
        },
    )
    .map_err(|e| e.to_string())?;
    check_counts(&out.labels, &targets)?;
    check_segments(&x, &labels, &out)
}

pub fn check_segments(
    x: &Array2<f64>,
    labels: &[ClassId],
    out: &comfortgan::baselines::Oversampled,
) -> Result<(), String> {
    if out.values.nrows() != out.draws.len() {
        return Err("one draw record per synthetic row expected".into());
    }
    for (i, draw) in out.draws.iter().enumerate() {
        let (a, b, s) = (x.row(draw.base), x.row(draw.neighbor), out.values.row(i));
        if labels[draw.base] != out.labels[i] || labels[draw.neighbor] != out.labels[i] {
            return Err(format!("row {i} interpolates across classes"));
        }
        if draw.base == draw.neighbor || !(0.0..=1.0).contains(&draw.gap) {
            return Err(format!("row {i} has a degenerate draw {draw:?}"));
        }
        let slack = dist(a, s) + dist(s, b) - dist(a, b);
        if slack.abs() > 1e-9 {
            return Err(format!("row {i} leaves the segment by {slack:e}"));
        }
    }
    Ok(())
}

pub fn check_counts(labels: &[ClassId], targets: &BTreeMap<ClassId, usize>) -> Result<(), String> {
    let mut got: BTreeMap<ClassId, usize> = BTreeMap::new();
    for &l in labels {
        *got.entry(l).or_default() += 1;
    }
    for (&c, &want) in targets {
        let found = got.remove(&c).unwrap_or(0);
        if found != want {
            return Err(format!("class {c}: {found} rows, target {want}"));
        }
    }
    match got.keys().next() {
        Some(c) => Err(format!("class {c} was not requested")),
        None => Ok(()),
    }
}

/// Allocations sum to `needed` and stay within 1 of proportional rounding;
/// all-zero ratios split uniformly.
pub fn check_allocation(ratios: &[f64], needed: usize) -> Result<(), String> {
    use comfortgan::baselines::allocate;
    let (counts, fallback) = allocate(ratios, needed);
    if counts.len() != ratios.len() {
        return Err("one count per row expected".into());
    }
    if counts.iter().sum::<usize>() != needed {
        return Err(format!("{counts:?} does not sum to {needed}"));
    }
    let total: f64 = ratios.iter().sum();
    if total <= 0.0 {
        let (lo, hi) = (counts.iter().min(), counts.iter().max());
        if !fallback || hi.zip(lo).is_some_and(|(h, l)| h - l > 1) {
            return Err(format!("zero ratios gave {counts:?} (fallback {fallback})"));
        }
        return Ok(());
    }
    if fallback {
        return Err("fallback flagged with positive ratios".into());
    }
    for (i, (&c, &r)) in counts.iter().zip(ratios).enumerate() {
        let exact = (r / total * needed as f64).round();
        if (c as f64 - exact).abs() > 1.0 {
            return Err(format!("row {i}: {c} vs proportional {exact} ({counts:?})"));
        }
    }
    Ok(())
}

/// ADASYN on a random instance: allocations per class follow the density
/// ratios, sum to the targets, and generated rows satisfy the segment property.
pub fn check_adasyn(seed: u64) -> Result<bool, String> {
    use comfortgan::baselines::{adasyn, adasyn_allocations, OversamplerConfig};
    let (x, labels, targets, k) = oversampling_instance(seed);
    let cfg = OversamplerConfig {
        k_neighbors: k,
        seed,
    };
    let allocations = adasyn_allocations(&x, &labels, &targets, &cfg).map_err(|e| e.to_string())?;
    let mut any_fallback = false;
    for a in &allocations {
        let needed = targets[&a.class];
        if a.counts.iter().sum::<usize>() != needed {
            return Err(format!(
                "class {}: allocation misses target {needed}",
                a.class
            ));
        }
        check_allocation(&a.ratios, needed)?;
        any_fallback |= a.fallback;
    }
    let out = adasyn(&x, &labels, &targets, &cfg).map_err(|e| e.to_string())?;
    check_counts(&out.labels, &targets)?;
    check_segments(&x, &labels, &out)?;
    Ok(any_fallback)
}

/// Resamples real rows of the requested class; works for single-row classes.
pub struct Resample;

impl comfortgan::augment::Augmenter for Resample {
    fn name(&self) -> &str {
        "resample"
    }

    fn origin(&self) -> comfortgan::augment::Origin {
        comfortgan::augment::Origin::Smote
    }

    fn generate(
        &self,
        train: &Dataset,
        targets: &BTreeMap<ClassId, usize>,
        seed: u64,
    ) -> Result<Dataset, comfortgan::augment::AugmentError> {
        let mut r = rng(seed);
        let mut idx = Vec::new();
        for (&c, &n) in targets {
            let members: Vec<usize> = (0..train.len())
                .filter(|&i| train.rows()[i].label == c)
                .collect();
            idx.extend((0..n).map(|_| members[r.random_range(0..members.len())]));
        }
        Ok(train.select(&idx))
    }
}

/// The balanced set is uniform at the predominant count and starts with the
/// real rows unchanged.
pub fn check_balance(
    train: &Dataset,
    aug: &dyn comfortgan::augment::Augmenter,
    seed: u64,
) -> Result<(), String> {
    use comfortgan::dataio::class_counts;
    let before = class_counts(train);
    let out = comfortgan::augment::balance(train, aug, seed).map_err(|e| e.to_string())?;
    let after = class_counts(&out.data);
    let top = before.predominant_count();
    if after.classes() != before.classes() || after.counts.values().any(|&n| n != top) {
        return Err(format!("histogram {after} is not uniform at {top}"));
    }
    let real: Vec<u64> = train.rows().iter().map(row_hash).collect();
    let kept: Vec<u64> = out.data.rows()[..train.len()]
        .iter()
        .map(row_hash)
        .collect();
    if real != kept || out.real().rows() != train.rows() {
        return Err("real rows changed".into());
    }
    Ok(())
}

/// F1-micro and accuracy on random single-label predictions.
pub fn f1_accuracy_gap(seed: u64) -> f64 {
    use comfortgan::forest::{accuracy, f1_micro};
    let mut r = rng(seed);
    let n = r.random_range(1..=200);
    let k = r.random_range(1..=7);
    let draw = |r: &mut ChaCha8Rng| ClassId(r.random_range(0..k) - 3);
    let actual: Vec<ClassId> = (0..n).map(|_| draw(&mut r)).collect();
    let predicted: Vec<ClassId> = (0..n).map(|_| draw(&mut r)).collect();
    (f1_micro(&predicted, &actual).unwrap() - accuracy(&predicted, &actual).unwrap()).abs()
}

/// Four well separated Gaussian blobs in 4-D, split into train and test.
pub fn blobs(seed: u64) -> (Array2<f64>, Vec<ClassId>, Array2<f64>, Vec<ClassId>) {
    let mut r = rng(seed);
    let centres = [
        [0.0, 0.0, 0.0, 0.0],
        [6.0, 0.0, 0.0, 0.0],
        [0.0, 6.0, 0.0, 0.0],
        [0.0, 0.0, 6.0, 6.0],
    ];
    let mut make = |n: usize| {
        let mut x = Array2::zeros((4 * n, 4));
        let mut y = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for i in 0..n {
                for j in 0..4 {
                    x[[c * n + i, j]] = centre[j]
                        + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut r);
                }
                y.push(ClassId(c as i32));
            }
        }
        (x, y)
    };
    let (xt, yt) = make(100);
    let (xs, ys) = make(50);
    (xt, yt, xs, ys)
}

// Toy GAN convergence.

pub const TOY_COUNTS: [usize; 3] = [429, 128, 43];

pub fn toy_means() -> Vec<Vec<f64>> {
    vec![
        vec![0.0, 0.0, 0.0, 0.0],
        vec![4.0, 4.0, 0.0, 0.0],
        vec![0.0, 4.0, 4.0, 4.0],
    ]
}

/// Controlled hyper-parameters with a smaller batch for the 600-row toy set.
pub fn toy_config(seed: u64, iterations: usize) -> comfortgan::gan::TrainConfig {
    use comfortgan::gan::{Preset, TrainConfig};
    TrainConfig {
        batch_size: 64,
        iterations,
        ..TrainConfig::preset(Preset::Controlled, seed)
    }
}

#[derive(Debug)]
pub struct ToyGanOutcome {
    /// Largest |generated mean - real mean| / pooled standard error over
    /// classes and features.
    pub worst_mean_z: f64,
    pub grad_norm: f64,
    pub efficacy: f64,
    pub baseline: f64,
}

fn column_stats(x: &Array2<f64>) -> Vec<(f64, f64, usize)> {
    let n = x.nrows();
    x.columns()
        .into_iter()
        .map(|c| {
            let m = c.mean().unwrap();
            let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            (m, v, n)
        })
        .collect()
}

fn class_matrix(ds: &Dataset, class: ClassId) -> Array2<f64> {
    let rows: Vec<&Row> = ds.rows().iter().filter(|r| r.label == class).collect();
    let d = ds.schema().n_features();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].cells[j].as_num().unwrap())
}

pub fn toy_gan_run(seed: u64, iterations: usize, generated_per_class: usize) -> ToyGanOutcome {
    use comfortgan::encode::DEFAULT_GAMMA;
    use comfortgan::eval::{EvalContext, EvalSettings};
    use comfortgan::gan::{interpolate_grad_norms, GanModel, Trainer};
    let ds = gaussian_mixture(&TOY_COUNTS, &toy_means(), 1.0, seed);
    let (train, test) = comfortgan::dataio::train_test_split(&ds, 0.7, seed).unwrap();
    let codec = Codec::fit(&train, DEFAULT_GAMMA).unwrap();
    let enc = codec.encode(&train, seed).unwrap();
    let mut trainer = Trainer::new(codec, enc, toy_config(seed, iterations)).unwrap();
    for _ in 0..iterations {
        trainer.iterate().unwrap();
    }
    let mut norms = Vec::new();
    let mut r = rng(seed ^ 0x5eed);
    for _ in 0..20 {
        let (real, labels) = trainer.real_batch();
        let fake = trainer.fake_batch(&labels).unwrap();
        norms.extend(
            interpolate_grad_norms(
                &trainer.model().critic,
                &real,
                &fake,
                &labels,
                Mode::Train,
                &mut r,
            )
            .unwrap(),
        );
    }
    let model: GanModel = trainer.into_model();
    let mut worst: f64 = 0.0;
    for k in 0..TOY_COUNTS.len() {
        let class = ClassId(k as i32);
        let gen = model
            .sample(class, generated_per_class, seed + k as u64)
            .unwrap();
        let (a, b) = (
            column_stats(&class_matrix(&train, class)),
            column_stats(&class_matrix(&gen, class)),
        );
        for ((ma, va, na), (mb, vb, nb)) in a.into_iter().zip(b) {
            let se = (va / na as f64 + vb / nb as f64).sqrt();
            worst = worst.max((ma - mb).abs() / se);
        }
    }
    let settings = EvalSettings {
        repetitions: 5,
        seed,
        ..EvalSettings::default()
    };
    let ctx = EvalContext::new(train, &test, settings).unwrap();
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    ToyGanOutcome {
        worst_mean_z: worst,
        grad_norm: norms.iter().sum::<f64>() / norms.len() as f64,
        efficacy: mean(ctx.efficacy(&model).unwrap()),
        baseline: mean(ctx.baseline_efficacy().unwrap()),
    }
}
