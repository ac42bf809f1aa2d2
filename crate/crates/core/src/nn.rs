//! Dense network building blocks with hand-written backward passes.
//!
//! Everything is `f64`. A [`Sequential`] stack records a [`Tape`] on the
//! forward pass; [`Sequential::backward`] replays it in reverse and returns
//! gradients in the same order as [`Sequential::params_mut`].

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

pub const LEAKY_RELU_ALPHA: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.01;
pub const BN_EPS: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },
    #[error("batch norm needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),
    #[error("backward called without a matching forward tape")]
    NoTape,
}

fn shape_err(expected: impl Into<String>, actual: impl Into<String>) -> NnError {
    NnError::Shape { expected: expected.into(), actual: actual.into() }
}

/// Row-major matrix; rows are batch items.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if rows * cols != data.len() {
            return Err(shape_err(format!("{rows}x{cols} = {} values", rows * cols), format!("{} values", data.len())));
        }
        Ok(Tensor2 { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NnError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(shape_err(format!("{cols} columns"), format!("{} columns", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Tensor2 { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor2 {
        Tensor2 { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| f(*v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn shape(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    fn same_shape(&self, other: &Tensor2) -> Result<(), NnError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(shape_err(self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Columns `start..end` as a new tensor.
    pub fn columns(&self, start: usize, end: usize) -> Tensor2 {
        let mut out = Tensor2::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Fully connected layer, `y = x·W + b`. `weight` is `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor2,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, with_bias: bool, rng: &mut R) -> Self {
        let s = (6.0 / (inputs + outputs) as f64).sqrt();
        let dist = Uniform::new_inclusive(-s, s).expect("finite bound");
        let data = (0..inputs * outputs).map(|_| dist.sample(rng)).collect();
        Dense {
            weight: Tensor2 { rows: inputs, cols: outputs, data },
            bias: with_bias.then(|| vec![0.0; outputs]),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.rows
    }

    pub fn outputs(&self) -> usize {
        self.weight.cols
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Tensor2, NnError> {
        if x.cols != self.inputs() {
            return Err(shape_err(format!("{} input columns", self.inputs()), format!("{} columns", x.cols)));
        }
        let out = self.outputs();
        let mut y = Tensor2::zeros(x.rows, out);
        for r in 0..x.rows {
            let yr = &mut y.data[r * out..(r + 1) * out];
            if let Some(b) = &self.bias {
                yr.copy_from_slice(b);
            }
            for (k, &xv) in x.row(r).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wk = &self.weight.data[k * out..(k + 1) * out];
                for (yv, wv) in yr.iter_mut().zip(wk) {
                    *yv += xv * wv;
                }
            }
        }
        Ok(y)
    }

    /// Returns `[dW, db?]` and the input gradient.
    pub fn backward(&self, x: &Tensor2, grad_out: &Tensor2) -> Result<(Vec<Vec<f64>>, Tensor2), NnError> {
        let (inp, out) = (self.inputs(), self.outputs());
        if x.cols != inp || grad_out.cols != out || x.rows != grad_out.rows {
            return Err(shape_err(format!("x n×{inp}, dy n×{out}"), format!("x {}, dy {}", x.shape(), grad_out.shape())));
        }
        let mut dw = vec![0.0; inp * out];
        for r in 0..x.rows {
            let dy = grad_out.row(r);
            for (k, &xv) in x.row(r).iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                for (g, d) in dw[k * out..(k + 1) * out].iter_mut().zip(dy) {
                    *g += xv * d;
                }
            }
        }
        let mut dx = Tensor2::zeros(x.rows, inp);
        for r in 0..x.rows {
            let dy = grad_out.row(r);
            for (k, g) in dx.row_mut(r).iter_mut().enumerate() {
                let wk = &self.weight.data[k * out..(k + 1) * out];
                *g = wk.iter().zip(dy).map(|(w, d)| w * d).sum();
            }
        }
        let mut grads = vec![dw];
        if self.bias.is_some() {
            let mut db = vec![0.0; out];
            for r in 0..grad_out.rows {
                for (g, d) in db.iter_mut().zip(grad_out.row(r)) {
                    *g += d;
                }
            }
            grads.push(db);
        }
        Ok((grads, dx))
    }

    fn params(&self) -> Vec<&[f64]> {
        let mut p = vec![self.weight.as_slice()];
        if let Some(b) = &self.bias {
            p.push(b);
        }
        p
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = vec![self.weight.as_mut_slice()];
        if let Some(b) = &mut self.bias {
            p.push(b);
        }
        p
    }
}

/// Per-feature batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    xhat: Tensor2,
    inv_std: Vec<f64>,
    mode: Mode,
}

impl BatchNorm {
    pub fn new(features: usize) -> Self {
        BatchNorm {
            gamma: vec![1.0; features],
            beta: vec![0.0; features],
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.len()
    }

    /// Train mode normalizes with the biased batch statistics and folds them
    /// into the running averages; infer mode uses the running averages and
    /// leaves the layer untouched.
    pub fn forward(&mut self, x: &Tensor2, mode: Mode) -> Result<(Tensor2, BatchNormCache), NnError> {
        let f = self.features();
        if x.cols != f {
            return Err(shape_err(format!("{f} columns"), format!("{} columns", x.cols)));
        }
        let (mean, var) = match mode {
            Mode::Train => {
                if x.rows < 2 {
                    return Err(NnError::BatchTooSmall(x.rows));
                }
                let n = x.rows as f64;
                let mut mean = vec![0.0; f];
                for r in 0..x.rows {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n);
                let mut var = vec![0.0; f];
                for r in 0..x.rows {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n);
                for j in 0..f {
                    self.running_mean[j] = (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
                    self.running_var[j] = (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
                }
                (mean, var)
            }
            Mode::Infer => return self.normalize(x, &self.running_mean, &self.running_var, mode),
        };
        self.normalize(x, &mean, &var, mode)
    }

    /// Infer-mode forward on a shared reference.
    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2, NnError> {
        if x.cols != self.features() {
            return Err(shape_err(format!("{} columns", self.features()), format!("{} columns", x.cols)));
        }
        Ok(self.normalize(x, &self.running_mean, &self.running_var, Mode::Infer)?.0)
    }

    fn normalize(&self, x: &Tensor2, mean: &[f64], var: &[f64], mode: Mode) -> Result<(Tensor2, BatchNormCache), NnError> {
        let f = self.features();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut xhat = Tensor2::zeros(x.rows, f);
        let mut y = Tensor2::zeros(x.rows, f);
        for r in 0..x.rows {
            let xr = x.row(r);
            for j in 0..f {
                let h = (xr[j] - mean[j]) * inv_std[j];
                xhat.data[r * f + j] = h;
                y.data[r * f + j] = self.gamma[j] * h + self.beta[j];
            }
        }
        Ok((y, BatchNormCache { xhat, inv_std, mode }))
    }

    /// Returns `[dgamma, dbeta]` and the input gradient. In train mode the
    /// gradient flows through the batch mean and variance.
    pub fn backward(&self, cache: &BatchNormCache, grad_out: &Tensor2) -> Result<(Vec<Vec<f64>>, Tensor2), NnError> {
        cache.xhat.same_shape(grad_out)?;
        let (rows, f) = (grad_out.rows, self.features());
        let mut dgamma = vec![0.0; f];
        let mut dbeta = vec![0.0; f];
        for r in 0..rows {
            for j in 0..f {
                let dy = grad_out.get(r, j);
                dgamma[j] += dy * cache.xhat.get(r, j);
                dbeta[j] += dy;
            }
        }
        let mut dx = Tensor2::zeros(rows, f);
        match cache.mode {
            Mode::Train => {
                let n = rows as f64;
                // dx = inv_std/n · (n·dxhat − Σdxhat − xhat·Σ(dxhat·xhat)), dxhat = dy·gamma
                for j in 0..f {
                    let sum_dxhat = dbeta[j] * self.gamma[j];
                    let sum_dxhat_xhat = dgamma[j] * self.gamma[j];
                    for r in 0..rows {
                        let dxhat = grad_out.get(r, j) * self.gamma[j];
                        dx.data[r * f + j] =
                            cache.inv_std[j] / n * (n * dxhat - sum_dxhat - cache.xhat.get(r, j) * sum_dxhat_xhat);
                    }
                }
            }
            Mode::Infer => {
                for r in 0..rows {
                    for j in 0..f {
                        dx.data[r * f + j] = grad_out.get(r, j) * self.gamma[j] * cache.inv_std[j];
                    }
                }
            }
        }
        Ok((vec![dgamma, dbeta], dx))
    }
}

pub fn leaky_relu(x: &Tensor2, alpha: f64) -> Tensor2 {
    x.map(|v| if v >= 0.0 { v } else { alpha * v })
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn apply(self, x: &Tensor2) -> Tensor2 {
        match self {
            Activation::LeakyRelu(alpha) => leaky_relu(x, alpha),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(f64::tanh),
        }
    }

    /// Gradient through the activation given its input `x` and output `y`.
    pub fn backward(self, x: &Tensor2, y: &Tensor2, grad_out: &Tensor2) -> Result<Tensor2, NnError> {
        x.same_shape(grad_out)?;
        let mut dx = grad_out.clone();
        for ((g, xv), yv) in dx.data.iter_mut().zip(&x.data).zip(&y.data) {
            *g *= match self {
                Activation::LeakyRelu(alpha) => {
                    if *xv >= 0.0 {
                        1.0
                    } else {
                        alpha
                    }
                }
                Activation::Sigmoid => yv * (1.0 - yv),
                Activation::Tanh => 1.0 - yv * yv,
            };
        }
        Ok(dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    Activation(Activation),
}

#[derive(Debug, Clone)]
enum Record {
    Dense { input: Tensor2 },
    BatchNorm(BatchNormCache),
    Activation { input: Tensor2, output: Tensor2 },
}

/// Intermediate values saved by a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    records: Vec<Record>,
}

impl Tape {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Sequential { layers }
    }

    /// `dense → batch-norm → LeakyReLU` blocks. Dense layers carry no bias
    /// because the batch-norm shift absorbs it.
    pub fn dense_bn_stack<R: Rng + ?Sized>(widths: &[usize], alpha: f64, rng: &mut R) -> Self {
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            layers.push(Layer::Dense(Dense::init(w[0], w[1], false, rng)));
            layers.push(Layer::BatchNorm(BatchNorm::new(w[1])));
            layers.push(Layer::Activation(Activation::LeakyRelu(alpha)));
        }
        Sequential { layers }
    }

    pub fn forward(&mut self, x: &Tensor2, mode: Mode) -> Result<(Tensor2, Tape), NnError> {
        let mut tape = Tape::default();
        let mut h = x.clone();
        for layer in &mut self.layers {
            let (next, record) = match layer {
                Layer::Dense(d) => (d.forward(&h)?, Record::Dense { input: h }),
                Layer::BatchNorm(bn) => {
                    let (y, cache) = bn.forward(&h, mode)?;
                    (y, Record::BatchNorm(cache))
                }
                Layer::Activation(a) => {
                    let y = a.apply(&h);
                    (y.clone(), Record::Activation { input: h, output: y })
                }
            };
            tape.records.push(record);
            h = next;
        }
        Ok((h, tape))
    }

    /// Forward pass without recording or touching running statistics.
    pub fn infer(&self, x: &Tensor2) -> Result<Tensor2, NnError> {
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h)?,
                Layer::BatchNorm(bn) => bn.infer(&h)?,
                Layer::Activation(a) => a.apply(&h),
            };
        }
        Ok(h)
    }

    /// Gradients for every parameter (in [`Sequential::params_mut`] order)
    /// and for the input.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor2) -> Result<(Vec<Vec<f64>>, Tensor2), NnError> {
        if tape.records.len() != self.layers.len() || tape.is_empty() && !self.layers.is_empty() {
            return Err(NnError::NoTape);
        }
        let mut grads_rev: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for (layer, record) in self.layers.iter().zip(&tape.records).rev() {
            let (pg, dx) = match (layer, record) {
                (Layer::Dense(d), Record::Dense { input }) => d.backward(input, &g)?,
                (Layer::BatchNorm(bn), Record::BatchNorm(cache)) => bn.backward(cache, &g)?,
                (Layer::Activation(a), Record::Activation { input, output }) => (Vec::new(), a.backward(input, output, &g)?),
                _ => return Err(NnError::NoTape),
            };
            grads_rev.push(pg);
            g = dx;
        }
        Ok((grads_rev.into_iter().rev().flatten().collect(), g))
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Dense(d) => d.params(),
                Layer::BatchNorm(bn) => vec![bn.gamma.as_slice(), bn.beta.as_slice()],
                Layer::Activation(_) => Vec::new(),
            })
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Dense(d) => d.params_mut(),
                Layer::BatchNorm(bn) => vec![bn.gamma.as_mut_slice(), bn.beta.as_mut_slice()],
                Layer::Activation(_) => Vec::new(),
            })
            .collect()
    }

    pub fn param_names(&self, prefix: &str) -> Vec<String> {
        let mut names = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Dense(d) => {
                    names.push(format!("{prefix}.{i}.weight"));
                    if d.bias.is_some() {
                        names.push(format!("{prefix}.{i}.bias"));
                    }
                }
                Layer::BatchNorm(_) => {
                    names.push(format!("{prefix}.{i}.gamma"));
                    names.push(format!("{prefix}.{i}.beta"));
                }
                Layer::Activation(_) => {}
            }
        }
        names
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are sized on the first step.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) -> Result<(), NnError> {
        if params.len() != grads.len() {
            return Err(shape_err(format!("{} gradient tensors", params.len()), format!("{}", grads.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(shape_err(format!("tensor {i} with {} values", p.len()), format!("{} values", g.len())));
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.len()) {
            return Err(shape_err("the shapes of the first step", "different shapes"));
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        self.t += 1;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for j in 0..g.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
