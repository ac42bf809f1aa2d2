//! Variational autoencoder over 9×32 rhythm tensors with a 2-D latent space.
//!
//! Encoder: 864 → 512 → 512 (dense, batch-norm, LeakyReLU each), then dense
//! heads for `mu` and `logvar`. Decoder: 2 → 512 → 512 with the same
//! blocks, then three dense heads of 288 cells squashed by sigmoid (onset
//! probability, velocity) and tanh (offset).
//!
//! The training loss is onset binary cross-entropy plus squared velocity and
//! offset errors on cells that hold a true onset, plus a weighted KL term.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoding::{decode_tensor, DecoderOutput, EncodingError, Pattern, RhythmTensor, NUM_CELLS, NUM_FEATURES};
use crate::nn::{
    sigmoid, AdamConfig, AdamState, Dense, Layer, Mode, NnError, Sequential, Tensor2, BN_EPS, BN_MOMENTUM,
    LEAKY_RELU_ALPHA,
};

pub const LATENT_DIM: usize = 2;
pub const HIDDEN: usize = 512;
/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the BCE.
pub const PROB_CLAMP: f64 = 1e-7;

const MAGIC: &[u8; 4] = b"RVAE";
const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VaeError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error("latent vector is not finite")]
    NonFiniteLatent,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("need at least 2 patterns to train, got {0}")]
    TooFewSamples(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("not a weight file (bad magic)")]
    BadMagic,
    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension mismatch: file has {found}, expected {expected}")]
    DimensionMismatch { expected: String, found: String },
    #[error("corrupt weight payload: {0}")]
    CorruptPayload(String),
}

/// A point in the 2-D latent space.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatentVector {
    pub x: f64,
    pub y: f64,
}

impl LatentVector {
    pub fn new(x: f64, y: f64) -> Self {
        LatentVector { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn lerp(self, other: LatentVector, t: f64) -> LatentVector {
        LatentVector { x: self.x + (other.x - self.x) * t, y: self.y + (other.y - self.y) * t }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub kl_weight_beta: f64,
    pub kl_warmup_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
    pub onset_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            kl_weight_beta: 1.0,
            kl_warmup_fraction: 0.1,
            val_fraction: 0.1,
            seed: 0,
            onset_threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), VaeError> {
        let bad = |m: &str| Err(VaeError::InvalidConfig(m.to_string()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must be in [0, 1)");
        }
        if !(self.kl_weight_beta >= 0.0 && self.kl_weight_beta.is_finite()) {
            return bad("kl_weight_beta must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.kl_warmup_fraction) {
            return bad("kl_warmup_fraction must be in [0, 1]");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must be in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.onset_threshold) {
            return bad("onset_threshold must be in [0, 1]");
        }
        Ok(())
    }

    /// KL weight for a zero-based epoch: linear ramp from 0 over the warm-up
    /// epochs, then constant.
    pub fn beta_at(&self, epoch: usize) -> f64 {
        let warm = (self.kl_warmup_fraction * self.epochs as f64).ceil() as usize;
        if warm == 0 {
            self.kl_weight_beta
        } else {
            self.kl_weight_beta * (epoch as f64 / warm as f64).min(1.0)
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Batch-mean loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub onset_bce: f64,
    pub velocity_mse: f64,
    pub offset_mse: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.total, self.onset_bce, self.velocity_mse, self.offset_mse, self.kl].iter().all(|v| v.is_finite())
    }

    fn scaled_add(&mut self, other: &LossBreakdown, w: f64) {
        self.total += w * other.total;
        self.onset_bce += w * other.onset_bce;
        self.velocity_mse += w * other.velocity_mse;
        self.offset_mse += w * other.offset_mse;
        self.kl += w * other.kl;
    }
}

/// Stacks tensors into a `batch × 864` matrix.
pub fn batch_features(items: &[&RhythmTensor]) -> Tensor2 {
    let mut x = Tensor2::zeros(items.len(), NUM_FEATURES);
    for (r, t) in items.iter().enumerate() {
        t.write_features(x.row_mut(r));
    }
    x
}

fn latent_tensor(z: &[LatentVector]) -> Result<Tensor2, VaeError> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(VaeError::NonFiniteLatent);
    }
    Ok(Tensor2::new(z.len(), LATENT_DIM, z.iter().flat_map(|v| [v.x, v.y]).collect())?)
}

/// Loss of `recon` (rows of `[probs | velocities | offsets]`) against
/// targets `x` (rows of `[onsets | velocities | offsets]`).
pub fn loss_from_features(
    x: &Tensor2,
    recon: &Tensor2,
    mu: &Tensor2,
    logvar: &Tensor2,
    beta: f64,
) -> Result<LossBreakdown, VaeError> {
    let n = x.rows();
    let shapes_ok = recon.rows() == n
        && mu.rows() == n
        && logvar.rows() == n
        && x.cols() == NUM_FEATURES
        && recon.cols() == NUM_FEATURES
        && mu.cols() == LATENT_DIM
        && logvar.cols() == LATENT_DIM;
    if !shapes_ok || n == 0 {
        return Err(NnError::Shape {
            expected: format!("n×{NUM_FEATURES} targets/recon and n×{LATENT_DIM} mu/logvar, n > 0"),
            actual: format!(
                "{}x{}, {}x{}, {}x{}, {}x{}",
                x.rows(),
                x.cols(),
                recon.rows(),
                recon.cols(),
                mu.rows(),
                mu.cols(),
                logvar.rows(),
                logvar.cols()
            ),
        }
        .into());
    }
    let mut out = LossBreakdown::default();
    for r in 0..n {
        let (t, y) = (x.row(r), recon.row(r));
        for c in 0..NUM_CELLS {
            let on = t[c];
            let p = y[c].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            out.onset_bce -= on * p.ln() + (1.0 - on) * (1.0 - p).ln();
            if on == 1.0 {
                let dv = y[NUM_CELLS + c] - t[NUM_CELLS + c];
                let doff = y[2 * NUM_CELLS + c] - t[2 * NUM_CELLS + c];
                out.velocity_mse += dv * dv;
                out.offset_mse += doff * doff;
            }
        }
        for d in 0..LATENT_DIM {
            let (m, lv) = (mu.get(r, d), logvar.get(r, d));
            out.kl += -0.5 * (1.0 + lv - m * m - lv.exp());
        }
    }
    let inv = 1.0 / n as f64;
    out.onset_bce *= inv;
    out.velocity_mse *= inv;
    out.offset_mse *= inv;
    out.kl *= inv;
    out.total = out.onset_bce + out.velocity_mse + out.offset_mse + beta * out.kl;
    Ok(out)
}

/// Loss over typed tensors; see [`loss_from_features`].
pub fn loss(
    x: &[RhythmTensor],
    recon: &[DecoderOutput],
    mu: &Tensor2,
    logvar: &Tensor2,
    beta: f64,
) -> Result<LossBreakdown, VaeError> {
    let targets = batch_features(&x.iter().collect::<Vec<_>>());
    let mut out = Tensor2::zeros(recon.len(), NUM_FEATURES);
    for (r, d) in recon.iter().enumerate() {
        out.row_mut(r).copy_from_slice(&d.to_features());
    }
    loss_from_features(&targets, &out, mu, logvar, beta)
}

/// `z = mu + exp(logvar / 2) · eps`.
pub fn reparameterize_with(mu: &Tensor2, logvar: &Tensor2, eps: &Tensor2) -> Tensor2 {
    let mut z = mu.clone();
    for ((zv, lv), e) in z.as_mut_slice().iter_mut().zip(logvar.as_slice()).zip(eps.as_slice()) {
        *zv += (0.5 * lv).exp() * e;
    }
    z
}

pub fn standard_normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor2::new(rows, cols, data).expect("sized")
}

/// Draws `z ~ N(mu, exp(logvar))` with the reparameterization trick.
pub fn reparameterize(mu: &Tensor2, logvar: &Tensor2, rng: &mut ChaCha8Rng) -> Tensor2 {
    let eps = standard_normal(mu.rows(), mu.cols(), rng);
    reparameterize_with(mu, logvar, &eps)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeModel {
    pub encoder: Sequential,
    pub mu_head: Dense,
    pub logvar_head: Dense,
    pub decoder: Sequential,
    pub onset_head: Dense,
    pub velocity_head: Dense,
    pub offset_head: Dense,
}

impl VaeModel {
    /// Freshly initialized model; the seed fixes every weight.
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Sequential::dense_bn_stack(&[NUM_FEATURES, HIDDEN, HIDDEN], LEAKY_RELU_ALPHA, &mut rng);
        let mu_head = Dense::init(HIDDEN, LATENT_DIM, true, &mut rng);
        let logvar_head = Dense::init(HIDDEN, LATENT_DIM, true, &mut rng);
        let decoder = Sequential::dense_bn_stack(&[LATENT_DIM, HIDDEN, HIDDEN], LEAKY_RELU_ALPHA, &mut rng);
        let onset_head = Dense::init(HIDDEN, NUM_CELLS, true, &mut rng);
        let velocity_head = Dense::init(HIDDEN, NUM_CELLS, true, &mut rng);
        let offset_head = Dense::init(HIDDEN, NUM_CELLS, true, &mut rng);
        VaeModel { encoder, mu_head, logvar_head, decoder, onset_head, velocity_head, offset_head }
    }

    /// Encodes a batch. Train mode needs at least two items and updates the
    /// batch-norm running statistics.
    pub fn encode(&mut self, x: &[RhythmTensor], mode: Mode) -> Result<(Tensor2, Tensor2), VaeError> {
        for t in x {
            t.validate()?;
        }
        let features = batch_features(&x.iter().collect::<Vec<_>>());
        match mode {
            Mode::Train => {
                let (h, _) = self.encoder.forward(&features, Mode::Train)?;
                Ok((self.mu_head.forward(&h)?, self.logvar_head.forward(&h)?))
            }
            Mode::Infer => self.encode_features(&features),
        }
    }

    /// Infer-mode encoding of `n × 864` features.
    pub fn encode_features(&self, x: &Tensor2) -> Result<(Tensor2, Tensor2), VaeError> {
        let h = self.encoder.infer(x)?;
        Ok((self.mu_head.forward(&h)?, self.logvar_head.forward(&h)?))
    }

    /// Infer-mode decoding to `n × 864` rows of `[probs | velocities | offsets]`.
    pub fn decode_features(&self, z: &Tensor2) -> Result<Tensor2, VaeError> {
        if !z.is_finite() {
            return Err(VaeError::NonFiniteLatent);
        }
        let h = self.decoder.infer(z)?;
        Ok(self.heads(&h)?.0)
    }

    pub fn decode(&self, z: &[LatentVector]) -> Result<Vec<DecoderOutput>, VaeError> {
        let out = self.decode_features(&latent_tensor(z)?)?;
        (0..out.rows()).map(|r| Ok(DecoderOutput::from_features(out.row(r))?)).collect()
    }

    /// Decodes one latent point and thresholds it into a pattern.
    pub fn generate(&self, z: LatentVector, threshold: f64) -> Result<Pattern, VaeError> {
        let raw = self.decode(&[z])?;
        Ok(decode_tensor(&raw[0], threshold))
    }

    /// Applies the three output heads; returns the squashed outputs and the
    /// pre-activation logits.
    fn heads(&self, h: &Tensor2) -> Result<(Tensor2, [Tensor2; 3]), VaeError> {
        let a_on = self.onset_head.forward(h)?;
        let a_vel = self.velocity_head.forward(h)?;
        let a_off = self.offset_head.forward(h)?;
        let mut out = Tensor2::zeros(h.rows(), NUM_FEATURES);
        for r in 0..h.rows() {
            let row = out.row_mut(r);
            for c in 0..NUM_CELLS {
                row[c] = sigmoid(a_on.get(r, c));
                row[NUM_CELLS + c] = sigmoid(a_vel.get(r, c));
                row[2 * NUM_CELLS + c] = a_off.get(r, c).tanh();
            }
        }
        Ok((out, [a_on, a_vel, a_off]))
    }

    /// Train-mode loss for features `x` with fixed reparameterization noise.
    pub fn loss_with_noise(&mut self, x: &Tensor2, eps: &Tensor2, beta: f64) -> Result<LossBreakdown, VaeError> {
        Ok(self.loss_and_grads(x, eps, beta)?.0)
    }

    /// Train-mode loss and its gradient for every parameter, in
    /// [`VaeModel::params_mut`] order.
    pub fn loss_and_grads(
        &mut self,
        x: &Tensor2,
        eps: &Tensor2,
        beta: f64,
    ) -> Result<(LossBreakdown, Vec<Vec<f64>>), VaeError> {
        let n = x.rows();
        let (h_enc, enc_tape) = self.encoder.forward(x, Mode::Train)?;
        let mu = self.mu_head.forward(&h_enc)?;
        let logvar = self.logvar_head.forward(&h_enc)?;
        if eps.rows() != n || eps.cols() != LATENT_DIM {
            return Err(NnError::Shape { expected: format!("{n}x{LATENT_DIM} noise"), actual: format!("{}x{}", eps.rows(), eps.cols()) }.into());
        }
        let z = reparameterize_with(&mu, &logvar, eps);
        let (h_dec, dec_tape) = self.decoder.forward(&z, Mode::Train)?;
        let (recon, _) = self.heads(&h_dec)?;
        let breakdown = loss_from_features(x, &recon, &mu, &logvar, beta)?;

        // gradients of the batch-mean loss w.r.t. the head logits
        let inv = 1.0 / n as f64;
        let mut d_on = Tensor2::zeros(n, NUM_CELLS);
        let mut d_vel = Tensor2::zeros(n, NUM_CELLS);
        let mut d_off = Tensor2::zeros(n, NUM_CELLS);
        for r in 0..n {
            let (t, y) = (x.row(r), recon.row(r));
            for c in 0..NUM_CELLS {
                let p = y[c];
                if p > PROB_CLAMP && p < 1.0 - PROB_CLAMP {
                    d_on.row_mut(r)[c] = (p - t[c]) * inv;
                }
                if t[c] == 1.0 {
                    let v = y[NUM_CELLS + c];
                    let o = y[2 * NUM_CELLS + c];
                    d_vel.row_mut(r)[c] = 2.0 * (v - t[NUM_CELLS + c]) * v * (1.0 - v) * inv;
                    d_off.row_mut(r)[c] = 2.0 * (o - t[2 * NUM_CELLS + c]) * (1.0 - o * o) * inv;
                }
            }
        }
        let (g_on, dh_on) = self.onset_head.backward(&h_dec, &d_on)?;
        let (g_vel, dh_vel) = self.velocity_head.backward(&h_dec, &d_vel)?;
        let (g_off, dh_off) = self.offset_head.backward(&h_dec, &d_off)?;
        let mut dh_dec = dh_on;
        for ((a, b), c) in dh_dec.as_mut_slice().iter_mut().zip(dh_vel.as_slice()).zip(dh_off.as_slice()) {
            *a += b + c;
        }
        let (g_dec, dz) = self.decoder.backward(&dec_tape, &dh_dec)?;

        let mut d_mu = Tensor2::zeros(n, LATENT_DIM);
        let mut d_lv = Tensor2::zeros(n, LATENT_DIM);
        for r in 0..n {
            for d in 0..LATENT_DIM {
                let (m, lv, e, g) = (mu.get(r, d), logvar.get(r, d), eps.get(r, d), dz.get(r, d));
                let sigma = (0.5 * lv).exp();
                d_mu.row_mut(r)[d] = g + beta * m * inv;
                d_lv.row_mut(r)[d] = g * e * 0.5 * sigma + beta * 0.5 * (lv.exp() - 1.0) * inv;
            }
        }
        let (g_mu, dh_mu) = self.mu_head.backward(&h_enc, &d_mu)?;
        let (g_lv, dh_lv) = self.logvar_head.backward(&h_enc, &d_lv)?;
        let mut dh_enc = dh_mu;
        for (a, b) in dh_enc.as_mut_slice().iter_mut().zip(dh_lv.as_slice()) {
            *a += b;
        }
        let (g_enc, _) = self.encoder.backward(&enc_tape, &dh_enc)?;

        let grads = [g_enc, g_mu, g_lv, g_dec, g_on, g_vel, g_off].into_iter().flatten().collect();
        Ok((breakdown, grads))
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut p = self.encoder.params();
        p.extend(dense_params(&self.mu_head));
        p.extend(dense_params(&self.logvar_head));
        p.extend(self.decoder.params());
        p.extend(dense_params(&self.onset_head));
        p.extend(dense_params(&self.velocity_head));
        p.extend(dense_params(&self.offset_head));
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.params_mut();
        p.extend(dense_params_mut(&mut self.mu_head));
        p.extend(dense_params_mut(&mut self.logvar_head));
        p.extend(self.decoder.params_mut());
        p.extend(dense_params_mut(&mut self.onset_head));
        p.extend(dense_params_mut(&mut self.velocity_head));
        p.extend(dense_params_mut(&mut self.offset_head));
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.encoder.param_names("encoder");
        for head in ["mu_head", "logvar_head"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names.extend(self.decoder.param_names("decoder"));
        for head in ["onset_head", "velocity_head", "offset_head"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    /// Every stored array: parameters followed by batch-norm running stats.
    fn state(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = self.param_names().into_iter().zip(self.params()).collect();
        for (prefix, net) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            for (i, l) in net.layers.iter().enumerate() {
                if let Layer::BatchNorm(bn) = l {
                    out.push((format!("{prefix}.{i}.running_mean"), &bn.running_mean));
                    out.push((format!("{prefix}.{i}.running_var"), &bn.running_var));
                }
            }
        }
        out
    }

    fn set_state(&mut self, arrays: Vec<Vec<f64>>) {
        let n_params = self.params().len();
        let mut it = arrays.into_iter();
        for (slot, values) in self.params_mut().into_iter().zip(it.by_ref().take(n_params)) {
            slot.copy_from_slice(&values);
        }
        for net in [&mut self.encoder, &mut self.decoder] {
            for l in net.layers.iter_mut() {
                if let Layer::BatchNorm(bn) = l {
                    bn.running_mean = it.next().expect("running mean");
                    bn.running_var = it.next().expect("running var");
                }
            }
        }
    }

    /// Serializes weights and running statistics into the versioned `RVAE`
    /// container: little-endian header, named f64 arrays, SHA-256 trailer.
    pub fn save_weights(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
        for dim in [NUM_FEATURES, HIDDEN, LATENT_DIM, NUM_CELLS] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in [LEAKY_RELU_ALPHA, BN_MOMENTUM, BN_EPS] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let state = self.state();
        out.extend_from_slice(&(state.len() as u32).to_le_bytes());
        for (name, values) in state {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u32).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn load_weights(bytes: &[u8]) -> Result<Self, VaeError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(MAGIC.as_slice()) {
            return Err(VaeError::BadMagic);
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(VaeError::UnsupportedVersion(version));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        let expected = [NUM_FEATURES, HIDDEN, LATENT_DIM, NUM_CELLS].map(|d| d as u32);
        if dims != expected {
            let fmt = |d: [u32; 4]| format!("input {} hidden {} latent {} cells {}", d[0], d[1], d[2], d[3]);
            return Err(VaeError::DimensionMismatch { expected: fmt(expected), found: fmt(dims) });
        }
        if bytes.len() < 32 {
            return Err(VaeError::CorruptPayload("file too short".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(VaeError::CorruptPayload("checksum mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: r.pos };
        let alpha = r.f64()?;
        let momentum = r.f64()?;
        let eps = r.f64()?;

        let mut model = VaeModel::new(0);
        for net in [&mut model.encoder, &mut model.decoder] {
            for l in net.layers.iter_mut() {
                match l {
                    Layer::BatchNorm(bn) => {
                        bn.momentum = momentum;
                        bn.eps = eps;
                    }
                    Layer::Activation(crate::nn::Activation::LeakyRelu(a)) => *a = alpha,
                    _ => {}
                }
            }
        }
        let names: Vec<String> = model.state().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != names.len() {
            return Err(VaeError::CorruptPayload(format!("expected {} arrays, found {count}", names.len())));
        }
        let expected: Vec<(String, usize)> = model.state().into_iter().map(|(n, v)| (n, v.len())).collect();
        let mut arrays = Vec::with_capacity(count);
        for (expected_name, expected_len) in &expected {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| VaeError::CorruptPayload("array name is not utf-8".into()))?;
            if name != expected_name {
                return Err(VaeError::CorruptPayload(format!("expected array {expected_name}, found {name}")));
            }
            let len = r.u32()? as usize;
            if len != *expected_len {
                return Err(VaeError::DimensionMismatch {
                    expected: format!("{name} with {expected_len} values"),
                    found: format!("{len} values"),
                });
            }
            arrays.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?);
        }
        if r.pos != body.len() {
            return Err(VaeError::CorruptPayload("trailing bytes".into()));
        }
        model.set_state(arrays);
        Ok(model)
    }
}

fn dense_params(d: &Dense) -> Vec<&[f64]> {
    let mut p = vec![d.weight.as_slice()];
    if let Some(b) = &d.bias {
        p.push(b.as_slice());
    }
    p
}

fn dense_params_mut(d: &mut Dense) -> Vec<&mut [f64]> {
    let mut p = vec![d.weight.as_mut_slice()];
    if let Some(b) = &mut d.bias {
        p.push(b.as_mut_slice());
    }
    p
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VaeError> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| VaeError::CorruptPayload(format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, VaeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, VaeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64, VaeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// One-based.
    pub epoch: usize,
    pub beta: f64,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: VaeModel,
    pub history: Vec<EpochReport>,
    pub cancelled: bool,
}

/// Deterministic train/validation split.
///
/// Holds out `round(n · val_fraction)` items, at least one and never so many
/// that fewer than two remain for training. With exactly two items nothing
/// is held out and validation runs on the training set.
pub fn split_dataset(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    if n <= 2 {
        return (idx.clone(), idx);
    }
    let n_val = ((n as f64 * val_fraction).round() as usize).clamp(1, n - 2);
    let val = idx[..n_val].to_vec();
    let train = idx[n_val..].to_vec();
    (train, val)
}

fn batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(batch_size).collect();
    // a trailing single item cannot be batch-normalized; fold it into the previous batch
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - batch_size - 1;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

/// Infer-mode loss with `z = mu`.
pub fn evaluate(model: &VaeModel, data: &[&RhythmTensor], beta: f64) -> Result<LossBreakdown, VaeError> {
    let x = batch_features(data);
    let (mu, logvar) = model.encode_features(&x)?;
    let recon = model.decode_features(&mu)?;
    loss_from_features(&x, &recon, &mu, &logvar, beta)
}

/// Trains a fresh model on `dataset`.
///
/// Everything random (initialization, split, shuffling, noise) derives from
/// `cfg.seed`. `on_epoch` sees each completed epoch together with the model
/// as of that epoch. Setting `cancel` stops before the next batch; the
/// partial epoch is not reported.
pub fn train(
    dataset: &[RhythmTensor],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &VaeModel),
    cancel: Option<&AtomicBool>,
) -> Result<TrainOutcome, VaeError> {
    cfg.validate()?;
    match dataset.len() {
        0 => return Err(VaeError::EmptyDataset),
        1 => return Err(VaeError::TooFewSamples(1)),
        _ => {}
    }
    for t in dataset {
        t.validate()?;
    }
    let mut model = VaeModel::new(cfg.seed);
    let mut history = Vec::new();
    let (train_idx, val_idx) = split_dataset(dataset.len(), cfg.val_fraction, cfg.seed);
    let val_set: Vec<&RhythmTensor> = val_idx.iter().map(|&i| &dataset[i]).collect();
    let batch_size = cfg.batch_size.min(train_idx.len()).max(2);

    let mut adam = AdamState::new(cfg.adam());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    noise_rng.set_stream(3);
    let mut order = train_idx;

    for epoch in 0..cfg.epochs {
        let beta = cfg.beta_at(epoch);
        order.shuffle(&mut shuffle_rng);
        let mut sum = LossBreakdown::default();
        for batch in batches(&order, batch_size) {
            if cancel.is_some_and(|c| c.load(Ordering::Relaxed)) {
                return Ok(TrainOutcome { model, history, cancelled: true });
            }
            let items: Vec<&RhythmTensor> = batch.iter().map(|&i| &dataset[i]).collect();
            let x = batch_features(&items);
            let eps = standard_normal(batch.len(), LATENT_DIM, &mut noise_rng);
            let (l, grads) = model.loss_and_grads(&x, &eps, beta)?;
            adam.step(&mut model.params_mut(), &grads)?;
            sum.scaled_add(&l, batch.len() as f64 / order.len() as f64);
        }
        let val = evaluate(&model, &val_set, beta)?;
        let report = EpochReport { epoch: epoch + 1, beta, train: sum, val };
        history.push(report);
        on_epoch(&report, &model);
    }
    Ok(TrainOutcome { model, history, cancelled: false })
}

/// Loss history as comma-separated text with a header row.
pub fn history_to_csv(history: &[EpochReport]) -> String {
    let mut s = String::from(
        "epoch,beta,train_total,val_total,train_onset_bce,train_velocity_mse,train_offset_mse,train_kl,\
         val_onset_bce,val_velocity_mse,val_offset_mse,val_kl\n",
    );
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            h.epoch,
            h.beta,
            h.train.total,
            h.val.total,
            h.train.onset_bce,
            h.train.velocity_mse,
            h.train.offset_mse,
            h.train.kl,
            h.val.onset_bce,
            h.val.velocity_mse,
            h.val.offset_mse,
            h.val.kl
        );
    }
    s
}
