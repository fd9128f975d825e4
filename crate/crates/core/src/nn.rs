//! Generator and critic multilayer perceptrons built on [`crate::autodiff`].
//!
//! Weights are stored `fan_in x fan_out` and applied as `x . W + b`.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    adam_step, AdamConfig, AdamState, Gradients, GraphError, Mode, Tape, Tensor, Var,
};
use crate::encode::{Segment, SlotActivation};

pub const GENERATOR_HIDDEN: [usize; 5] = [128, 256, 128, 64, 32];
pub const CRITIC_HIDDEN: [usize; 5] = [64, 128, 64, 32, 16];
pub const LEAKY_SLOPE: f64 = 0.2;
pub const CRITIC_DROPOUT: f64 = 0.5;
/// Weight of the previous running statistic in the batch-norm moving average.
pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum NnError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{what} width mismatch: expected {expected}, found {found}")]
    Width {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid output layout: {0}")]
    Layout(String),
}

type Result<T> = std::result::Result<T, NnError>;

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    values: Vec<Vec<f64>>,
}

/// Named list of 2-D tensors. Serialises as `[{name, values: [[..], ..]}, ..]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "Vec<NamedTensor>", try_from = "Vec<NamedTensor>")]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl From<ParamSet> for Vec<NamedTensor> {
    fn from(p: ParamSet) -> Self {
        p.names
            .into_iter()
            .zip(p.tensors)
            .map(|(name, t)| NamedTensor {
                name,
                values: t.rows().into_iter().map(|r| r.to_vec()).collect(),
            })
            .collect()
    }
}

impl TryFrom<Vec<NamedTensor>> for ParamSet {
    type Error = String;

    fn try_from(list: Vec<NamedTensor>) -> std::result::Result<Self, String> {
        let mut out = ParamSet::default();
        for nt in list {
            let rows = nt.values.len();
            let cols = nt.values.first().map_or(0, Vec::len);
            if nt.values.iter().any(|r| r.len() != cols) {
                return Err(format!("ragged tensor `{}`", nt.name));
            }
            let flat: Vec<f64> = nt.values.into_iter().flatten().collect();
            let t = Array2::from_shape_vec((rows, cols), flat).map_err(|e| e.to_string())?;
            out.push(nt.name, t);
        }
        Ok(out)
    }
}

impl ParamSet {
    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Total number of scalar entries.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Places every tensor on the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.input(t.clone()).map_err(NnError::from))
            .collect()
    }

    /// Places every tensor on the tape as a constant (inference only).
    pub fn bind_constant(&self, tape: &mut Tape) -> Result<Vec<Var>> {
        self.tensors
            .iter()
            .map(|t| tape.constant(t.clone()).map_err(NnError::from))
            .collect()
    }

    /// Gradients for `vars` (as returned by [`ParamSet::bind`]); unreached
    /// parameters get zeros.
    pub fn collect_grads(&self, vars: &[Var], grads: &Gradients) -> Vec<Tensor> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(p.dim()))
            })
            .collect()
    }

    pub fn adam_update(
        &mut self,
        grads: &[Tensor],
        state: &mut AdamState,
        cfg: &AdamConfig,
    ) -> Result<()> {
        Ok(adam_step(
            &mut self.tensors,
            &self.names,
            grads,
            state,
            cfg,
        )?)
    }

    /// Hash of the exact bit patterns of all entries.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (n, t) in self.names.iter().zip(&self.tensors) {
            h.write(n.as_bytes());
            for v in t.iter() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }
}

/// Glorot-uniform `fan_in x fan_out` matrix.
pub fn glorot_uniform<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit))
}

fn check_width(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(NnError::Width {
            what,
            expected,
            found,
        });
    }
    Ok(())
}

/// Conditional generator: `[z, y]` -> 5 x (linear, ReLU, batch norm) -> linear,
/// followed by tanh on continuous/cyclical slots and a softmax per categorical group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorNet {
    pub latent_dim: usize,
    pub label_width: usize,
    pub output_width: usize,
    pub segments: Vec<Segment>,
    pub params: ParamSet,
    /// Batch-norm running mean and variance, two entries per hidden layer.
    pub running: ParamSet,
}

pub struct GeneratorOutput {
    pub out: Var,
    /// Batch mean and variance per hidden layer (train mode only).
    pub batch_stats: Vec<(Tensor, Tensor)>,
}

impl GeneratorNet {
    pub fn new(
        latent_dim: usize,
        label_width: usize,
        segments: Vec<Segment>,
        seed: u64,
    ) -> Result<Self> {
        let mut next = 0;
        for seg in &segments {
            if seg.slots.start != next || seg.slots.end <= seg.slots.start {
                return Err(NnError::Layout(format!(
                    "segment {:?} does not continue at slot {next}",
                    seg.slots
                )));
            }
            next = seg.slots.end;
        }
        if next == 0 {
            return Err(NnError::Layout("no output slots".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut running = ParamSet::default();
        let mut fan_in = latent_dim + label_width;
        for (i, &width) in GENERATOR_HIDDEN.iter().enumerate() {
            params.push(
                format!("g{i}.weight"),
                glorot_uniform(fan_in, width, &mut rng),
            );
            params.push(format!("g{i}.bias"), Array2::zeros((1, width)));
            params.push(format!("g{i}.bn_scale"), Array2::ones((1, width)));
            params.push(format!("g{i}.bn_shift"), Array2::zeros((1, width)));
            running.push(format!("g{i}.running_mean"), Array2::zeros((1, width)));
            running.push(format!("g{i}.running_var"), Array2::ones((1, width)));
            fan_in = width;
        }
        params.push("g_out.weight", glorot_uniform(fan_in, next, &mut rng));
        params.push("g_out.bias", Array2::zeros((1, next)));
        Ok(GeneratorNet {
            latent_dim,
            label_width,
            output_width: next,
            segments,
            params,
            running,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        z: Var,
        y: Var,
        mode: Mode,
    ) -> Result<GeneratorOutput> {
        check_width("latent", self.latent_dim, tape.shape(z).1)?;
        check_width("label", self.label_width, tape.shape(y).1)?;
        check_width("parameter list", self.params.len(), vars.len())?;
        let mut h = tape.concat_cols(&[z, y])?;
        let mut batch_stats = Vec::new();
        for i in 0..GENERATOR_HIDDEN.len() {
            let p = &vars[4 * i..4 * i + 4];
            let lin = tape.matmul(h, p[0])?;
            let lin = tape.add_bias(lin, p[1])?;
            let act = tape.relu(lin)?;
            h = match mode {
                Mode::Train => {
                    let (out, m, v) = tape.batch_norm_train(act, p[2], p[3], BN_EPS)?;
                    batch_stats.push((m, v));
                    out
                }
                Mode::Eval => tape.batch_norm_eval(
                    act,
                    p[2],
                    p[3],
                    &self.running.tensors()[2 * i],
                    &self.running.tensors()[2 * i + 1],
                    BN_EPS,
                )?,
            };
        }
        let k = 4 * GENERATOR_HIDDEN.len();
        let lin = tape.matmul(h, vars[k])?;
        let logits = tape.add_bias(lin, vars[k + 1])?;
        let mut parts = Vec::with_capacity(self.segments.len());
        for seg in &self.segments {
            let block = tape.slice_cols(logits, seg.slots.clone())?;
            parts.push(match seg.activation {
                SlotActivation::Tanh => tape.tanh(block)?,
                SlotActivation::Softmax => tape.softmax_rows(block)?,
            });
        }
        let out = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        Ok(GeneratorOutput { out, batch_stats })
    }

    /// Folds one batch's statistics into the running averages.
    pub fn update_running(&mut self, batch_stats: &[(Tensor, Tensor)]) {
        let running = self.running.tensors_mut();
        for (i, (m, v)) in batch_stats.iter().enumerate() {
            running[2 * i].zip_mut_with(m, |r, &b| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
            running[2 * i + 1]
                .zip_mut_with(v, |r, &b| *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b);
        }
    }

    /// Parameter count as a pure function of the widths.
    pub fn expected_param_count(
        latent_dim: usize,
        label_width: usize,
        output_width: usize,
    ) -> usize {
        let mut fan_in = latent_dim + label_width;
        let mut total = 0;
        for &w in &GENERATOR_HIDDEN {
            total += fan_in * w + 3 * w;
            fan_in = w;
        }
        total + fan_in * output_width + output_width
    }
}

/// Conditional Wasserstein critic: `[x, y]` -> 5 x (linear, leaky ReLU 0.2,
/// dropout 0.5) -> linear scalar score. No normalisation layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub feature_width: usize,
    pub label_width: usize,
    pub params: ParamSet,
}

impl CriticNet {
    pub fn new(feature_width: usize, label_width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::default();
        let mut fan_in = feature_width + label_width;
        for (i, &width) in CRITIC_HIDDEN.iter().enumerate() {
            params.push(
                format!("d{i}.weight"),
                glorot_uniform(fan_in, width, &mut rng),
            );
            params.push(format!("d{i}.bias"), Array2::zeros((1, width)));
            fan_in = width;
        }
        params.push("d_out.weight", glorot_uniform(fan_in, 1, &mut rng));
        params.push("d_out.bias", Array2::zeros((1, 1)));
        CriticNet {
            feature_width,
            label_width,
            params,
        }
    }

    pub fn input_width(&self) -> usize {
        self.feature_width + self.label_width
    }

    /// One score per row (n x 1). Dropout masks come from `rng` in train mode.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x: Var,
        y: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        check_width("critic feature", self.feature_width, tape.shape(x).1)?;
        check_width("label", self.label_width, tape.shape(y).1)?;
        check_width("parameter list", self.params.len(), vars.len())?;
        let mut h = tape.concat_cols(&[x, y])?;
        for i in 0..CRITIC_HIDDEN.len() {
            let lin = tape.matmul(h, vars[2 * i])?;
            let lin = tape.add_bias(lin, vars[2 * i + 1])?;
            let act = tape.leaky_relu(lin, LEAKY_SLOPE)?;
            h = tape.dropout(act, CRITIC_DROPOUT, mode, rng)?;
        }
        let k = 2 * CRITIC_HIDDEN.len();
        let lin = tape.matmul(h, vars[k])?;
        Ok(tape.add_bias(lin, vars[k + 1])?)
    }

    pub fn expected_param_count(feature_width: usize, label_width: usize) -> usize {
        let mut fan_in = feature_width + label_width;
        let mut total = 0;
        for &w in &CRITIC_HIDDEN {
            total += fan_in * w + w;
            fan_in = w;
        }
        total + fan_in + 1
    }
}

/// Generator output plus label must be exactly the critic input.
pub fn check_wiring(generator: &GeneratorNet, critic: &CriticNet) -> Result<()> {
    check_width(
        "critic input",
        critic.input_width(),
        generator.output_width + generator.label_width,
    )?;
    check_width("critic label", critic.label_width, generator.label_width)
}
