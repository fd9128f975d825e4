use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{GanError, GanModel, LossRecord, Result, TrainConfig};
use crate::autodiff::{AdamConfig, AdamState, Mode, Tape, Tensor, Var};
use crate::encode::{Codec, EncodedMatrix};
use crate::nn::CriticNet;
use crate::seed;

/// Keeps the norm differentiable at a zero gradient.
const NORM_EPS: f64 = 1e-12;

fn interpolate(real: &Tensor, fake: &Tensor, eps: &[f64]) -> Result<Tensor> {
    if real.dim() != fake.dim() || eps.len() != real.nrows() {
        return Err(GanError::Shape {
            real: real.dim(),
            fake: fake.dim(),
        });
    }
    let mut x = fake.clone();
    for ((mut row, r), &e) in x.rows_mut().into_iter().zip(real.rows()).zip(eps) {
        row.zip_mut_with(&r, |f, &r| *f = e * r + (1.0 - e) * *f);
    }
    Ok(x)
}

/// `lambda * mean_i (||d critic(x_hat) / d x_hat_i||_2 - 1)^2` with
/// `x_hat_i = eps_i * real_i + (1 - eps_i) * fake_i`. The returned node is
/// differentiable with respect to everything `critic` reads.
pub fn gradient_penalty_with<F>(
    tape: &mut Tape,
    real: &Tensor,
    fake: &Tensor,
    eps: &[f64],
    lambda: f64,
    critic: F,
) -> Result<Var>
where
    F: FnOnce(&mut Tape, Var) -> Result<Var>,
{
    let x_hat = tape.input(interpolate(real, fake, eps)?)?;
    let scores = critic(tape, x_hat)?;
    let total = tape.sum(scores)?;
    let g = tape.grad_as_node(total, x_hat)?;
    let sq = tape.square(g)?;
    let row_sq = tape.sum_cols(sq)?;
    let row_sq = tape.add_scalar(row_sq, NORM_EPS)?;
    let norm = tape.sqrt(row_sq)?;
    let dev = tape.add_scalar(norm, -1.0)?;
    let dev_sq = tape.square(dev)?;
    let m = tape.mean(dev_sq)?;
    Ok(tape.scale(m, lambda)?)
}

/// Gradient penalty for a [`CriticNet`] with per-row `eps ~ U(0, 1)` from `rng`.
#[allow(clippy::too_many_arguments)]
pub fn gradient_penalty<R: Rng + ?Sized>(
    tape: &mut Tape,
    critic: &CriticNet,
    vars: &[Var],
    real: &Tensor,
    fake: &Tensor,
    labels: Var,
    lambda: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    let eps: Vec<f64> = (0..real.nrows()).map(|_| rng.random::<f64>()).collect();
    gradient_penalty_with(tape, real, fake, &eps, lambda, |t, x| {
        Ok(critic.forward(t, vars, x, labels, mode, rng)?)
    })
}

/// Per-row critic gradient norms at random interpolates of `real` and `fake`.
pub fn interpolate_grad_norms<R: Rng + ?Sized>(
    critic: &CriticNet,
    real: &Tensor,
    fake: &Tensor,
    labels: &Tensor,
    mode: Mode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let eps: Vec<f64> = (0..real.nrows()).map(|_| rng.random::<f64>()).collect();
    let mut tape = Tape::new();
    let vars = critic.params.bind_constant(&mut tape)?;
    let x = tape.input(interpolate(real, fake, &eps)?)?;
    let y = tape.constant(labels.clone())?;
    let s = critic.forward(&mut tape, &vars, x, y, mode, rng)?;
    let total = tape.sum(s)?;
    let grads = tape.backward(total)?;
    let g = grads
        .get(x)
        .cloned()
        .unwrap_or_else(|| Array2::zeros(real.dim()));
    Ok(g.map_axis(Axis(1), |r| r.dot(&r).sqrt()).to_vec())
}

/// Owns the model and optimiser state during training.
pub struct Trainer {
    model: GanModel,
    data: EncodedMatrix,
    /// Row indices per label-vocabulary index; only non-empty classes.
    by_class: Vec<Vec<usize>>,
    adam: AdamConfig,
    g_state: AdamState,
    d_state: AdamState,
    rng: ChaCha8Rng,
}

impl Trainer {
    /// `data` is the smoothed encoding of the training set under `codec`.
    pub fn new(codec: Codec, data: EncodedMatrix, config: TrainConfig) -> Result<Self> {
        if data.n_rows() == 0 {
            return Err(GanError::EmptyTrainSet);
        }
        if data.values.ncols() != codec.width() || data.labels.ncols() != codec.label_width() {
            return Err(GanError::Config(format!(
                "encoded data is {}+{} wide, codec expects {}+{}",
                data.values.ncols(),
                data.labels.ncols(),
                codec.width(),
                codec.label_width()
            )));
        }
        let mut by_class = vec![Vec::new(); codec.label_width()];
        for (i, &c) in data.class_ids.iter().enumerate() {
            by_class[codec.class_index(c)?].push(i);
        }
        by_class.retain(|rows| !rows.is_empty());
        let adam = AdamConfig {
            lr: config.learning_rate,
            ..AdamConfig::default()
        };
        let rng = ChaCha8Rng::seed_from_u64(seed::derive(config.seed, "train"));
        Ok(Trainer {
            model: GanModel::init(codec, config)?,
            data,
            by_class,
            adam,
            g_state: AdamState::default(),
            d_state: AdamState::default(),
            rng,
        })
    }

    pub fn model(&self) -> &GanModel {
        &self.model
    }

    pub fn into_model(self) -> GanModel {
        self.model
    }

    fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        (
            self.data.values.select(Axis(0), idx),
            self.data.labels.select(Axis(0), idx),
        )
    }

    /// Uniform sample with replacement of real rows and their smoothed labels.
    pub fn real_batch(&mut self) -> (Tensor, Tensor) {
        let n = self.data.n_rows();
        let idx: Vec<usize> = (0..self.model.config.batch_size)
            .map(|_| self.rng.random_range(0..n))
            .collect();
        self.gather(&idx)
    }

    /// Smoothed labels of a uniformly chosen class, taken from a random real row
    /// of that class.
    pub fn generator_labels(&mut self) -> Tensor {
        let idx: Vec<usize> = (0..self.model.config.batch_size)
            .map(|_| {
                let rows = &self.by_class[self.rng.random_range(0..self.by_class.len())];
                rows[self.rng.random_range(0..rows.len())]
            })
            .collect();
        self.gather(&idx).1
    }

    fn latent(&mut self, n: usize) -> Tensor {
        let rng = &mut self.rng;
        Array2::from_shape_fn((n, self.model.config.latent_dim), |_| {
            StandardNormal.sample(rng)
        })
    }

    /// Generator output in train mode; running statistics are left alone.
    pub fn fake_batch(&mut self, labels: &Tensor) -> Result<Tensor> {
        let z = self.latent(labels.nrows());
        let mut tape = Tape::new();
        let gen = &self.model.generator;
        let vars = gen.params.bind_constant(&mut tape)?;
        let zv = tape.constant(z)?;
        let yv = tape.constant(labels.clone())?;
        let out = gen.forward(&mut tape, &vars, zv, yv, Mode::Train)?;
        Ok(tape.value(out.out).clone())
    }

    /// One Adam update of the critic on the loss
    /// `mean D(fake) - mean D(real) + gradient penalty`.
    pub fn critic_update(&mut self, real: &Tensor, labels: &Tensor, fake: &Tensor) -> Result<f64> {
        if real.dim() != fake.dim() {
            return Err(GanError::Shape {
                real: real.dim(),
                fake: fake.dim(),
            });
        }
        let lambda = self.model.config.gp_lambda;
        let critic = &self.model.critic;
        let rng = &mut self.rng;
        let mut tape = Tape::new();
        let vars = critic.params.bind(&mut tape)?;
        let x = tape.constant(real.clone())?;
        let xf = tape.constant(fake.clone())?;
        let y = tape.constant(labels.clone())?;
        let d_real = critic.forward(&mut tape, &vars, x, y, Mode::Train, rng)?;
        let d_fake = critic.forward(&mut tape, &vars, xf, y, Mode::Train, rng)?;
        let m_real = tape.mean(d_real)?;
        let m_fake = tape.mean(d_fake)?;
        let mut loss = tape.sub(m_fake, m_real)?;
        if lambda > 0.0 {
            let gp = gradient_penalty(
                &mut tape,
                critic,
                &vars,
                real,
                fake,
                y,
                lambda,
                Mode::Train,
                rng,
            )?;
            loss = tape.add(loss, gp)?;
        }
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(GanError::NonFiniteLoss("critic"));
        }
        let grads = tape.backward(loss)?;
        let grads = critic.params.collect_grads(&vars, &grads);
        self.model
            .critic
            .params
            .adam_update(&grads, &mut self.d_state, &self.adam)?;
        Ok(value)
    }

    pub fn critic_step(&mut self) -> Result<f64> {
        let (real, labels) = self.real_batch();
        let fake = self.fake_batch(&labels)?;
        self.critic_update(&real, &labels, &fake)
    }

    /// One Adam update of the generator on `-mean D(G(z, y), y)`; folds the
    /// batch statistics into the batch-norm running averages.
    pub fn generator_update(&mut self, labels: &Tensor) -> Result<f64> {
        let z = self.latent(labels.nrows());
        let gen = &self.model.generator;
        let critic = &self.model.critic;
        let mut tape = Tape::new();
        let gv = gen.params.bind(&mut tape)?;
        let cv = critic.params.bind_constant(&mut tape)?;
        let zv = tape.constant(z)?;
        let yv = tape.constant(labels.clone())?;
        let out = gen.forward(&mut tape, &gv, zv, yv, Mode::Train)?;
        let score = critic.forward(&mut tape, &cv, out.out, yv, Mode::Train, &mut self.rng)?;
        let m = tape.mean(score)?;
        let loss = tape.scale(m, -1.0)?;
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(GanError::NonFiniteLoss("generator"));
        }
        let grads = tape.backward(loss)?;
        let grads = gen.params.collect_grads(&gv, &grads);
        let gen = &mut self.model.generator;
        gen.params
            .adam_update(&grads, &mut self.g_state, &self.adam)?;
        gen.update_running(&out.batch_stats);
        Ok(value)
    }

    pub fn generator_step(&mut self) -> Result<f64> {
        let labels = self.generator_labels();
        self.generator_update(&labels)
    }

    /// `n_critic` critic steps followed by one generator step.
    pub fn iterate(&mut self) -> Result<LossRecord> {
        let iteration = self.model.history.len() + 1;
        let wrap = |stage| {
            move |e| GanError::Diverged {
                iteration,
                stage,
                source: Box::new(e),
            }
        };
        let n_critic = self.model.config.n_critic;
        let mut d_total = 0.0;
        for _ in 0..n_critic {
            d_total += self.critic_step().map_err(wrap("critic"))?;
        }
        let g_loss = self.generator_step().map_err(wrap("generator"))?;
        let rec = LossRecord {
            iteration,
            g_loss,
            d_loss: d_total / n_critic as f64,
        };
        self.model.history.push(rec);
        Ok(rec)
    }
}

/// Runs `config.iterations` generator iterations from a fresh initialisation.
pub fn train(codec: Codec, data: &EncodedMatrix, config: TrainConfig) -> Result<GanModel> {
    let iterations = config.iterations;
    let mut trainer = Trainer::new(codec, data.clone(), config)?;
    for i in 0..iterations {
        let rec = trainer.iterate()?;
        if (i + 1) % 1000 == 0 {
            log::info!(
                "iteration {}: g_loss {:.4}, d_loss {:.4}",
                rec.iteration,
                rec.g_loss,
                rec.d_loss
            );
        }
    }
    Ok(trainer.into_model())
}
