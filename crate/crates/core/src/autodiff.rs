//! Reverse-mode automatic differentiation over 2-D `f64` tensors.
//!
//! A [`Tape`] records every operation in creation order, which is already a
//! topological order. Two reverse sweeps are available:
//!
//! * [`Tape::backward`] computes plain numeric gradients for every node that
//!   depends on an input leaf;
//! * [`Tape::grad_as_node`] emits the gradient computation itself onto the
//!   tape, so the returned gradient is an ordinary node that can be combined
//!   further and differentiated again (double backprop).
//!
//! Scalars are 1x1 tensors. Subgradients of ReLU/leaky ReLU at exactly zero
//! use the negative-side slope.

use std::ops::Range;

use ndarray::{s, Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Tensor = Array2<f64>;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{0} produced a non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NotScalar((usize, usize)),
    #[error("the requested input does not reach the output")]
    Unreachable,
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, GraphError>;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Constant,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Tanh(usize),
    Exp(usize),
    Square(usize),
    Sqrt(usize),
    Recip(usize),
    Sum(usize),
    Mean(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    PadCols(usize, usize),
}

impl Op {
    fn parents(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Input | Constant => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) => vec![*a, *b],
            Transpose(a)
            | Scale(a, _)
            | AddScalar(a)
            | Relu(a)
            | LeakyRelu(a, _)
            | Tanh(a)
            | Exp(a)
            | Square(a)
            | Sqrt(a)
            | Recip(a)
            | Sum(a)
            | Mean(a)
            | SumRows(a)
            | SumCols(a)
            | BroadcastRows(a)
            | BroadcastCols(a)
            | BroadcastScalar(a)
            | SliceCols(a, _, _)
            | PadCols(a, _) => vec![*a],
            ConcatCols(ps) => ps.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Numeric gradients from one [`Tape::backward`] call.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar_tensor(v: f64) -> Tensor {
    Array2::from_elem((1, 1), v)
}

fn relu_mask(x: &Tensor, slope: f64) -> Tensor {
    x.mapv(|v| if v > 0.0 { 1.0 } else { slope })
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// First element; meant for 1x1 outputs.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(GraphError::NonFinite(name));
        }
        let requires_grad = match &op {
            Op::Input => true,
            Op::Constant => false,
            other => other.parents().iter().any(|&p| self.nodes[p].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf (parameter or input whose gradient is wanted).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Input, "input")
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Constant, "constant")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(GraphError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a.0, b.0), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a.0), "transpose")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a.0, b.0), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a.0, b.0), "mul")
    }

    /// `x` (n x d) plus row vector `bias` (1 x d) on every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.0 != 1 || sb.1 != sx.1 {
            return Err(GraphError::Shape {
                op: "add_bias",
                lhs: sx,
                rhs: sb,
            });
        }
        let v = self.value(x) + self.value(bias);
        self.push(v, Op::AddBias(x.0, bias.0), "add_bias")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x) * c;
        self.push(v, Op::Scale(x.0, c), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x) + c;
        self.push(v, Op::AddScalar(x.0), "add_scalar")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).mapv(|v| v.max(0.0));
        self.push(v, Op::Relu(x.0), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let v = self.value(x).mapv(|v| if v > 0.0 { v } else { slope * v });
        self.push(v, Op::LeakyRelu(x.0, slope), "leaky_relu")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x.0), "tanh")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).mapv(f64::exp);
        self.push(v, Op::Exp(x.0), "exp")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).mapv(|v| v * v);
        self.push(v, Op::Square(x.0), "square")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < 0.0) {
            return Err(GraphError::Invalid("sqrt of a negative value".into()));
        }
        let v = self.value(x).mapv(f64::sqrt);
        self.push(v, Op::Sqrt(x.0), "sqrt")
    }

    pub fn recip(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).mapv(|v| 1.0 / v);
        self.push(v, Op::Recip(x.0), "recip")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = scalar_tensor(self.value(x).sum());
        self.push(v, Op::Sum(x.0), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(GraphError::Invalid("mean of an empty tensor".into()));
        }
        let v = scalar_tensor(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x.0), "mean")
    }

    /// Column sums: n x d -> 1 x d.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(x.0), "sum_rows")
    }

    /// Row sums: n x d -> n x 1.
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(x.0), "sum_cols")
    }

    /// 1 x d -> n x d.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.0 != 1 {
            return Err(GraphError::Shape {
                op: "broadcast_rows",
                lhs: sx,
                rhs: (n, sx.1),
            });
        }
        let v = self
            .value(x)
            .broadcast((n, sx.1))
            .expect("checked shape")
            .to_owned();
        self.push(v, Op::BroadcastRows(x.0), "broadcast_rows")
    }

    /// n x 1 -> n x d.
    pub fn broadcast_cols(&mut self, x: Var, d: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.1 != 1 {
            return Err(GraphError::Shape {
                op: "broadcast_cols",
                lhs: sx,
                rhs: (sx.0, d),
            });
        }
        let v = self
            .value(x)
            .broadcast((sx.0, d))
            .expect("checked shape")
            .to_owned();
        self.push(v, Op::BroadcastCols(x.0), "broadcast_cols")
    }

    /// 1 x 1 -> rows x cols.
    pub fn broadcast_scalar(&mut self, x: Var, shape: (usize, usize)) -> Result<Var> {
        let sx = self.shape(x);
        if sx != (1, 1) {
            return Err(GraphError::Shape {
                op: "broadcast_scalar",
                lhs: sx,
                rhs: shape,
            });
        }
        let v = Array2::from_elem(shape, self.scalar(x));
        self.push(v, Op::BroadcastScalar(x.0), "broadcast_scalar")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| GraphError::Invalid("concat of nothing".into()))?;
        let n = self.shape(*first).0;
        for p in parts {
            if self.shape(*p).0 != n {
                return Err(GraphError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(*first),
                    rhs: self.shape(*p),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("checked row counts");
        self.push(
            v,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            "concat_cols",
        )
    }

    pub fn slice_cols(&mut self, x: Var, cols: Range<usize>) -> Result<Var> {
        let sx = self.shape(x);
        if cols.start > cols.end || cols.end > sx.1 {
            return Err(GraphError::Invalid(format!(
                "column range {cols:?} outside width {}",
                sx.1
            )));
        }
        let v = self.value(x).slice(s![.., cols.clone()]).to_owned();
        self.push(v, Op::SliceCols(x.0, cols.start, cols.end), "slice_cols")
    }

    /// Places `x` at column `start` of an all-zero n x `total` tensor.
    pub fn pad_cols(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let (n, w) = self.shape(x);
        if start + w > total {
            return Err(GraphError::Invalid("padding narrower than input".into()));
        }
        let mut v = Array2::zeros((n, total));
        v.slice_mut(s![.., start..start + w]).assign(self.value(x));
        self.push(v, Op::PadCols(x.0, start), "pad_cols")
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by 1/(1-rate). Identity in eval mode.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(GraphError::Invalid(format!("dropout rate {rate}")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask = self.value(x).mapv(|_| {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                keep
            }
        });
        let m = self.constant(mask)?;
        self.mul(x, m)
    }

    /// Batch normalisation over rows using the batch's own (biased) statistics.
    /// Returns the output and the batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Tensor, Tensor)> {
        let n = self.shape(x).0;
        if n == 0 {
            return Err(GraphError::Invalid("batch norm of an empty batch".into()));
        }
        let inv_n = 1.0 / n as f64;
        let total = self.sum_rows(x)?;
        let mu = self.scale(total, inv_n)?;
        let mu_b = self.broadcast_rows(mu, n)?;
        let centered = self.sub(x, mu_b)?;
        let sq = self.square(centered)?;
        let sq_total = self.sum_rows(sq)?;
        let var = self.scale(sq_total, inv_n)?;
        let shifted = self.add_scalar(var, eps)?;
        let std = self.sqrt(shifted)?;
        let inv = self.recip(std)?;
        let inv_b = self.broadcast_rows(inv, n)?;
        let normed = self.mul(centered, inv_b)?;
        let out = self.affine(normed, gamma, beta)?;
        let (m, v) = (self.value(mu).clone(), self.value(var).clone());
        Ok((out, m, v))
    }

    /// Batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f64,
    ) -> Result<Var> {
        let n = self.shape(x).0;
        let neg_mean = self.constant(running_mean.mapv(|m| -m))?;
        let centered = self.add_bias(x, neg_mean)?;
        let inv = self.constant(running_var.mapv(|v| 1.0 / (v + eps).sqrt()))?;
        let inv_b = self.broadcast_rows(inv, n)?;
        let normed = self.mul(centered, inv_b)?;
        self.affine(normed, gamma, beta)
    }

    fn affine(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = self.shape(x).0;
        let g = self.broadcast_rows(gamma, n)?;
        let scaled = self.mul(x, g)?;
        self.add_bias(scaled, beta)
    }

    /// Row-wise softmax over all columns of `x`. The row max is subtracted as a
    /// constant, which leaves values and derivatives unchanged.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.shape(x);
        let row_max = self
            .value(x)
            .map_axis(Axis(1), |r| r.fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .insert_axis(Axis(1));
        let m = self.constant(row_max)?;
        let m_b = self.broadcast_cols(m, d)?;
        let shifted = self.sub(x, m_b)?;
        let e = self.exp(shifted)?;
        let z = self.sum_cols(e)?;
        let inv = self.recip(z)?;
        let inv_b = self.broadcast_cols(inv, d)?;
        self.mul(e, inv_b)
    }

    fn check_scalar(&self, out: Var) -> Result<()> {
        let s = self.shape(out);
        if s != (1, 1) {
            return Err(GraphError::NotScalar(s));
        }
        Ok(())
    }

    /// Numeric reverse sweep from a scalar output. Each node is visited once.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        self.check_scalar(out)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[out.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[out.0] = Some(scalar_tensor(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let wants = |p: usize| self.nodes[p].requires_grad;
            let val = |p: usize| &self.nodes[p].value;
            use Op::*;
            match &node.op {
                Input | Constant => {}
                MatMul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], g.dot(&val(*b).t()));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], val(*a).t().dot(&g));
                    }
                }
                Transpose(a) => accumulate(&mut grads[*a], g.t().to_owned()),
                Add(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], g);
                    }
                }
                Sub(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], g.clone());
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], -g);
                    }
                }
                Mul(a, b) => {
                    if wants(*a) {
                        accumulate(&mut grads[*a], &g * val(*b));
                    }
                    if wants(*b) {
                        accumulate(&mut grads[*b], &g * val(*a));
                    }
                }
                AddBias(x, b) => {
                    if wants(*b) {
                        accumulate(&mut grads[*b], g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if wants(*x) {
                        accumulate(&mut grads[*x], g);
                    }
                }
                Scale(x, c) => accumulate(&mut grads[*x], g * *c),
                AddScalar(x) => accumulate(&mut grads[*x], g),
                Relu(x) => accumulate(&mut grads[*x], g * relu_mask(val(*x), 0.0)),
                LeakyRelu(x, slope) => accumulate(&mut grads[*x], g * relu_mask(val(*x), *slope)),
                Tanh(x) => accumulate(&mut grads[*x], g * node.value.mapv(|y| 1.0 - y * y)),
                Exp(x) => accumulate(&mut grads[*x], g * &node.value),
                Square(x) => accumulate(&mut grads[*x], g * val(*x) * 2.0),
                Sqrt(x) => accumulate(&mut grads[*x], g * node.value.mapv(|y| 0.5 / y)),
                Recip(x) => accumulate(&mut grads[*x], g * node.value.mapv(|y| -y * y)),
                Sum(x) => accumulate(&mut grads[*x], Array2::from_elem(val(*x).dim(), g[[0, 0]])),
                Mean(x) => {
                    let t = val(*x);
                    let each = g[[0, 0]] / t.len() as f64;
                    accumulate(&mut grads[*x], Array2::from_elem(t.dim(), each));
                }
                SumRows(x) => {
                    let d = val(*x).dim();
                    accumulate(&mut grads[*x], g.broadcast(d).expect("1 x d").to_owned());
                }
                SumCols(x) => {
                    let d = val(*x).dim();
                    accumulate(&mut grads[*x], g.broadcast(d).expect("n x 1").to_owned());
                }
                BroadcastRows(x) => {
                    accumulate(&mut grads[*x], g.sum_axis(Axis(0)).insert_axis(Axis(0)))
                }
                BroadcastCols(x) => {
                    accumulate(&mut grads[*x], g.sum_axis(Axis(1)).insert_axis(Axis(1)))
                }
                BroadcastScalar(x) => accumulate(&mut grads[*x], scalar_tensor(g.sum())),
                ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        if wants(p) {
                            let piece = g.slice(s![.., start..start + w]).to_owned();
                            accumulate(&mut grads[p], piece);
                        }
                        start += w;
                    }
                }
                SliceCols(x, start, end) => {
                    let mut full = Array2::zeros(val(*x).dim());
                    full.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads[*x], full);
                }
                PadCols(x, start) => {
                    let w = val(*x).ncols();
                    accumulate(
                        &mut grads[*x],
                        g.slice(s![.., *start..*start + w]).to_owned(),
                    );
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Gradient of scalar `out` with respect to `wrt`, built from tape
    /// operations so that it can itself be differentiated.
    pub fn grad_as_node(&mut self, out: Var, wrt: Var) -> Result<Var> {
        self.check_scalar(out)?;
        let len = self.nodes.len();
        let mut depends = vec![false; len];
        depends[wrt.0] = true;
        for i in wrt.0 + 1..len {
            depends[i] = self.nodes[i].op.parents().iter().any(|&p| depends[p]);
        }
        if !depends[out.0] {
            return Err(GraphError::Unreachable);
        }

        let mut grads: Vec<Option<Var>> = vec![None; len];
        grads[out.0] = Some(self.constant(scalar_tensor(1.0))?);
        for i in (wrt.0 + 1..=out.0).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            let y = Var(i);
            let mut emit = |tape: &mut Tape, p: usize, gp: Var| -> Result<()> {
                if !depends[p] {
                    return Ok(());
                }
                grads[p] = Some(match grads[p] {
                    Some(acc) => tape.add(acc, gp)?,
                    None => gp,
                });
                Ok(())
            };
            use Op::*;
            match op.clone() {
                Input | Constant => {}
                MatMul(a, b) => {
                    if depends[a] {
                        let bt = self.transpose(Var(b))?;
                        let ga = self.matmul(g, bt)?;
                        emit(self, a, ga)?;
                    }
                    if depends[b] {
                        let at = self.transpose(Var(a))?;
                        let gb = self.matmul(at, g)?;
                        emit(self, b, gb)?;
                    }
                }
                Transpose(a) => {
                    let ga = self.transpose(g)?;
                    emit(self, a, ga)?;
                }
                Add(a, b) => {
                    emit(self, a, g)?;
                    emit(self, b, g)?;
                }
                Sub(a, b) => {
                    emit(self, a, g)?;
                    if depends[b] {
                        let gb = self.scale(g, -1.0)?;
                        emit(self, b, gb)?;
                    }
                }
                Mul(a, b) => {
                    if depends[a] {
                        let ga = self.mul(g, Var(b))?;
                        emit(self, a, ga)?;
                    }
                    if depends[b] {
                        let gb = self.mul(g, Var(a))?;
                        emit(self, b, gb)?;
                    }
                }
                AddBias(x, b) => {
                    emit(self, x, g)?;
                    if depends[b] {
                        let gb = self.sum_rows(g)?;
                        emit(self, b, gb)?;
                    }
                }
                Scale(x, c) => {
                    let gx = self.scale(g, c)?;
                    emit(self, x, gx)?;
                }
                AddScalar(x) => emit(self, x, g)?,
                Relu(x) | LeakyRelu(x, _) => {
                    let slope = if let LeakyRelu(_, s) = op { s } else { 0.0 };
                    let mask = self.constant(relu_mask(self.value(Var(x)), slope))?;
                    let gx = self.mul(g, mask)?;
                    emit(self, x, gx)?;
                }
                Tanh(x) => {
                    let y2 = self.square(y)?;
                    let neg = self.scale(y2, -1.0)?;
                    let d = self.add_scalar(neg, 1.0)?;
                    let gx = self.mul(g, d)?;
                    emit(self, x, gx)?;
                }
                Exp(x) => {
                    let gx = self.mul(g, y)?;
                    emit(self, x, gx)?;
                }
                Square(x) => {
                    let two_x = self.scale(Var(x), 2.0)?;
                    let gx = self.mul(g, two_x)?;
                    emit(self, x, gx)?;
                }
                Sqrt(x) => {
                    let r = self.recip(y)?;
                    let half = self.scale(r, 0.5)?;
                    let gx = self.mul(g, half)?;
                    emit(self, x, gx)?;
                }
                Recip(x) => {
                    let y2 = self.square(y)?;
                    let neg = self.scale(y2, -1.0)?;
                    let gx = self.mul(g, neg)?;
                    emit(self, x, gx)?;
                }
                Sum(x) => {
                    let sx = self.shape(Var(x));
                    let gx = self.broadcast_scalar(g, sx)?;
                    emit(self, x, gx)?;
                }
                Mean(x) => {
                    let sx = self.shape(Var(x));
                    let each = self.scale(g, 1.0 / (sx.0 * sx.1) as f64)?;
                    let gx = self.broadcast_scalar(each, sx)?;
                    emit(self, x, gx)?;
                }
                SumRows(x) => {
                    let n = self.shape(Var(x)).0;
                    let gx = self.broadcast_rows(g, n)?;
                    emit(self, x, gx)?;
                }
                SumCols(x) => {
                    let d = self.shape(Var(x)).1;
                    let gx = self.broadcast_cols(g, d)?;
                    emit(self, x, gx)?;
                }
                BroadcastRows(x) => {
                    let gx = self.sum_rows(g)?;
                    emit(self, x, gx)?;
                }
                BroadcastCols(x) => {
                    let gx = self.sum_cols(g)?;
                    emit(self, x, gx)?;
                }
                BroadcastScalar(x) => {
                    let gx = self.sum(g)?;
                    emit(self, x, gx)?;
                }
                ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.shape(Var(p)).1;
                        if depends[p] {
                            let gp = self.slice_cols(g, start..start + w)?;
                            emit(self, p, gp)?;
                        }
                        start += w;
                    }
                }
                SliceCols(x, start, _) => {
                    let total = self.shape(Var(x)).1;
                    let gx = self.pad_cols(g, start, total)?;
                    emit(self, x, gx)?;
                }
                PadCols(x, start) => {
                    let w = self.shape(Var(x)).1;
                    let gx = self.slice_cols(g, start..start + w)?;
                    emit(self, x, gx)?;
                }
            }
        }
        grads[wrt.0].ok_or(GraphError::Unreachable)
    }
}

/// Adam hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.0,
            beta2: 0.9,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for one parameter list.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(
    params: &mut [Tensor],
    names: &[String],
    grads: &[Tensor],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() {
        return Err(GraphError::Invalid(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.dim() != g.dim() {
            return Err(GraphError::Shape {
                op: "adam_step",
                lhs: p.dim(),
                rhs: g.dim(),
            });
        }
        if !g.iter().all(|v| v.is_finite()) {
            let name = names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
            return Err(GraphError::NonFiniteGradient(name));
        }
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| Array2::zeros(p.dim())).collect();
        state.v = state.m.clone();
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            });
    }
    Ok(())
}
