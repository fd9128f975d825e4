//! comfortGAN: conditional Wasserstein GAN with gradient penalty.

mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{AugmentError, Augmenter, Origin};
use crate::autodiff::{GraphError, Mode, Tape, Tensor};
use crate::dataio::{ClassId, DataError, Dataset};
use crate::encode::{Codec, CodecError, DEFAULT_GAMMA};
use crate::nn::{check_wiring, CriticNet, GeneratorNet, NnError};
use crate::seed;

pub use train::{gradient_penalty, gradient_penalty_with, interpolate_grad_norms, train, Trainer};

#[derive(Debug, Error)]
pub enum GanError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("batch shape mismatch: real {real:?}, fake {fake:?}")]
    Shape {
        real: (usize, usize),
        fake: (usize, usize),
    },
    #[error("training diverged at iteration {iteration} ({stage}): {source}")]
    Diverged {
        iteration: usize,
        stage: &'static str,
        #[source]
        source: Box<GanError>,
    },
    #[error("non-finite {0} loss")]
    NonFiniteLoss(&'static str),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("unknown preset `{0}` (expected controlled, field or ashrae)")]
    UnknownPreset(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, GanError>;

/// Named hyper-parameter sets for the three reference datasets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Controlled,
    Field,
    Ashrae,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Controlled => "controlled",
            Preset::Field => "field",
            Preset::Ashrae => "ashrae",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = GanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "controlled" => Ok(Preset::Controlled),
            "field" => Ok(Preset::Field),
            "ashrae" => Ok(Preset::Ashrae),
            other => Err(GanError::UnknownPreset(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Critic updates per generator update.
    pub n_critic: usize,
    pub latent_dim: usize,
    pub learning_rate: f64,
    /// Generator iterations.
    pub iterations: usize,
    pub gp_lambda: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        let (batch_size, n_critic, latent_dim, iterations) = match preset {
            Preset::Controlled => (128, 1, 20, 20_000),
            Preset::Field => (128, 3, 80, 20_000),
            Preset::Ashrae => (64, 1, 100, 200_000),
        };
        TrainConfig {
            batch_size,
            n_critic,
            latent_dim,
            learning_rate: 2e-4,
            iterations,
            gp_lambda: 10.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(GanError::Config(msg.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.n_critic == 0 {
            return bad("n_critic must be positive");
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a positive number");
        }
        if !(self.gp_lambda >= 0.0 && self.gp_lambda.is_finite()) {
            return bad("gp_lambda must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub g_loss: f64,
    /// Mean critic loss over the iteration's critic steps.
    pub d_loss: f64,
}

/// Trained (or freshly initialised) networks with everything needed to sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub config: TrainConfig,
    pub codec: Codec,
    pub generator: GeneratorNet,
    pub critic: CriticNet,
    pub history: Vec<LossRecord>,
}

/// Rows generated per forward pass when sampling.
const SAMPLE_CHUNK: usize = 1024;

impl GanModel {
    /// Untrained networks sized for `codec`.
    pub fn init(codec: Codec, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = GeneratorNet::new(
            config.latent_dim,
            codec.label_width(),
            codec.segments(),
            seed::derive(config.seed, "generator-init"),
        )?;
        let critic = CriticNet::new(
            codec.width(),
            codec.label_width(),
            seed::derive(config.seed, "critic-init"),
        );
        check_wiring(&generator, &critic)?;
        Ok(GanModel {
            config,
            codec,
            generator,
            critic,
            history: Vec::new(),
        })
    }

    /// Fits the codec on `train`, smooths it once with a seed drawn from the
    /// config, and trains.
    pub fn fit(train_set: &Dataset, config: TrainConfig) -> Result<Self> {
        let codec = Codec::fit(train_set, DEFAULT_GAMMA)?;
        let data = codec.encode(train_set, seed::derive(config.seed, "smoothing"))?;
        train(codec, &data, config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let model: GanModel = serde_json::from_reader(BufReader::new(File::open(path)?))?;
        check_wiring(&model.generator, &model.critic)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self)?;
        w.flush()?;
        Ok(())
    }

    /// Generator output in encoded space for `n` rows of `class`, in eval mode
    /// with a deterministic one-hot label.
    pub fn sample_encoded(&self, class: ClassId, n: usize, seed: u64) -> Result<Tensor> {
        let one_hot = self.codec.one_hot(class)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array2::zeros((n, self.generator.output_width));
        let mut done = 0;
        while done < n {
            let m = SAMPLE_CHUNK.min(n - done);
            let z = Array2::from_shape_fn((m, self.config.latent_dim), |_| {
                StandardNormal.sample(&mut rng)
            });
            let y = Array2::from_shape_fn((m, one_hot.len()), |(_, j)| one_hot[j]);
            let mut tape = Tape::new();
            let vars = self.generator.params.bind_constant(&mut tape)?;
            let zv = tape.constant(z)?;
            let yv = tape.constant(y)?;
            let g = self
                .generator
                .forward(&mut tape, &vars, zv, yv, Mode::Eval)?;
            out.slice_mut(ndarray::s![done..done + m, ..])
                .assign(tape.value(g.out));
            done += m;
        }
        Ok(out)
    }

    /// `n` decoded rows of `class`.
    pub fn sample(&self, class: ClassId, n: usize, seed: u64) -> Result<Dataset> {
        let values = self.sample_encoded(class, n, seed)?;
        Ok(self.codec.decode_features(&values, &vec![class; n])?)
    }
}

impl Augmenter for GanModel {
    fn name(&self) -> &str {
        "comfortgan"
    }

    fn origin(&self) -> Origin {
        Origin::ComfortGan
    }

    fn generate(
        &self,
        train_set: &Dataset,
        targets: &BTreeMap<ClassId, usize>,
        seed: u64,
    ) -> std::result::Result<Dataset, AugmentError> {
        let mut out = Dataset::empty(train_set.schema().clone());
        for (&class, &n) in targets {
            if n == 0 {
                continue;
            }
            let rows = self.sample(
                class,
                n,
                seed::derive_indexed(seed, "gan-class", class.0 as u64),
            )?;
            out = out.concat(&rows)?;
        }
        Ok(out)
    }
}

/// Writes `iteration,g_loss,d_loss`, keeping the first record, every
/// `stride`-th iteration and the last record.
pub fn write_loss_csv<W: Write>(history: &[LossRecord], stride: usize, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["iteration", "g_loss", "d_loss"])
        .map_err(DataError::from)?;
    let stride = stride.max(1);
    for (i, rec) in history.iter().enumerate() {
        if i == 0 || rec.iteration % stride == 0 || i + 1 == history.len() {
            wtr.write_record([
                rec.iteration.to_string(),
                rec.g_loss.to_string(),
                rec.d_loss.to_string(),
            ])
            .map_err(DataError::from)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{class_counts, Cell, Column, ColumnKind, Row, Schema};

    pub(crate) fn toy() -> Dataset {
        let schema = Schema::new(vec![
            Column::new("a", ColumnKind::Continuous),
            Column::new("hour", ColumnKind::Cyclical { period: 24 }),
            Column::new("kind", ColumnKind::Categorical),
            Column::new("y", ColumnKind::Label),
        ])
        .unwrap();
        let rows = (0..40)
            .map(|i| Row {
                cells: vec![
                    Cell::Num(i as f64),
                    Cell::Num((i % 24) as f64),
                    Cell::Cat(["p", "q", "r"][i % 3].into()),
                ],
                label: ClassId(if i < 28 {
                    0
                } else if i < 36 {
                    1
                } else {
                    2
                }),
            })
            .collect();
        Dataset::new(schema, rows).unwrap()
    }

    fn small_config(iterations: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            n_critic: 1,
            latent_dim: 4,
            learning_rate: 2e-4,
            iterations,
            gp_lambda: 10.0,
            seed: 3,
        }
    }

    #[test]
    fn presets() {
        let c = TrainConfig::preset(Preset::Controlled, 0);
        assert_eq!((c.batch_size, c.n_critic, c.latent_dim), (128, 1, 20));
        let f = TrainConfig::preset(Preset::Field, 0);
        assert_eq!((f.batch_size, f.n_critic, f.latent_dim), (128, 3, 80));
        let a = TrainConfig::preset(Preset::Ashrae, 0);
        assert_eq!((a.batch_size, a.n_critic, a.latent_dim), (64, 1, 100));
        assert_eq!(a.iterations, 200_000);
        assert_eq!(c.iterations, 20_000);
        assert_eq!(c.learning_rate, 2e-4);
        assert_eq!(c.gp_lambda, 10.0);
        assert_eq!("field".parse::<Preset>().unwrap(), Preset::Field);
        assert!("huge".parse::<Preset>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(1);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = small_config(1);
        c.gp_lambda = -1.0;
        assert!(c.validate().is_err());
        assert!(small_config(0).validate().is_ok());
    }

    #[test]
    fn zero_iterations_is_initialisation() {
        let ds = toy();
        let m = GanModel::fit(&ds, small_config(0)).unwrap();
        let init = GanModel::init(m.codec.clone(), small_config(0)).unwrap();
        assert_eq!(m, init);
        assert!(m.history.is_empty());
    }

    #[test]
    fn sampling_contract() {
        let ds = toy();
        let m = GanModel::fit(&ds, small_config(5)).unwrap();
        assert_eq!(m.history.len(), 5);
        assert!(m.sample(ClassId(1), 0, 0).unwrap().is_empty());
        let s = m.sample(ClassId(2), 50, 9).unwrap();
        assert_eq!(s.len(), 50);
        for r in s.rows() {
            assert_eq!(r.label, ClassId(2));
            let a = r.cells[0].as_num().unwrap();
            assert!((0.0..=39.0).contains(&a));
            let h = r.cells[1].as_num().unwrap();
            assert!((0.0..24.0).contains(&h));
            assert!(["p", "q", "r"].contains(&r.cells[2].as_cat().unwrap()));
        }
        assert_eq!(s, m.sample(ClassId(2), 50, 9).unwrap());
        assert!(matches!(
            m.sample(ClassId(7), 1, 0),
            Err(GanError::Codec(CodecError::UnknownClass(_)))
        ));
        // chunked generation agrees with one pass
        let big = m.sample_encoded(ClassId(0), SAMPLE_CHUNK + 3, 4).unwrap();
        assert_eq!(big.nrows(), SAMPLE_CHUNK + 3);
    }

    #[test]
    fn deterministic_training_and_json_round_trip() {
        let ds = toy();
        let a = GanModel::fit(&ds, small_config(4)).unwrap();
        let b = GanModel::fit(&ds, small_config(4)).unwrap();
        assert_eq!(a, b);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        a.save(&path).unwrap();
        let back = GanModel::load(&path).unwrap();
        assert_eq!(back, a);
        let mut other = small_config(4);
        other.seed = 4;
        let c = GanModel::fit(&ds, other).unwrap();
        assert_ne!(
            c.generator.params.fingerprint(),
            a.generator.params.fingerprint()
        );
    }

    #[test]
    fn balances_through_augmenter() {
        let ds = toy();
        let m = GanModel::fit(&ds, small_config(2)).unwrap();
        let b = crate::augment::balance(&ds, &m, 1).unwrap();
        let h = class_counts(&b.data);
        assert!(h.is_uniform());
        assert_eq!(h.get(ClassId(2)), 28);
        assert_eq!(b.real(), ds);
    }

    #[test]
    fn loss_csv_downsampling() {
        let history: Vec<LossRecord> = (1..=250)
            .map(|i| LossRecord {
                iteration: i,
                g_loss: 1.0,
                d_loss: -0.5,
            })
            .collect();
        let mut out = Vec::new();
        write_loss_csv(&history, 100, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let iters: Vec<&str> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(iters, ["1", "100", "200", "250"]);
        assert!(text.starts_with("iteration,g_loss,d_loss\n1,1,-0.5\n"));
    }
}
