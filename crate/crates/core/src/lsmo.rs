//! Latent-conditioned generative model of the solution set, trained on
//! importance-weighted samples with a capacity-controlled variational loss.
//!
//! Per sample the minimised loss is
//!
//! ```text
//! w_i * ( ||x_i - dec(z_i)||² / (2 σ²) + γ |KL(q(z|x_i) || N(0, I)) - C| )
//! ```
//!
//! averaged over the minibatch, with `z_i` drawn from the encoder posterior
//! by reparameterisation and `C` ramped linearly during a warm-up phase.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objective::{evaluate_columns, Objective, ShapingConfig};
use crate::proposal::{standard_normal_matrix, ModelPerturbation, Proposal, WeightedBatch};
use crate::tinynet::{Adam, DenseNet, NetGrads};

/// Encoder log-variances are clamped to `[-LOGVAR_CLAMP, LOGVAR_CLAMP]`.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Latent range used for evaluation grids: the 10% and 90% quantiles of the
/// standard normal prior.
pub const Z_EVAL_RANGE: (f64, f64) = (-1.28, 1.28);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_samples: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight of the capacity term.
    pub gamma: f64,
    pub capacity_max: f64,
    /// Fraction of epochs over which the capacity ramps from zero.
    pub capacity_warmup_frac: f64,
    pub shaping_alpha: f64,
    pub seed: u64,
    /// Number of sample/weight/train rounds; rounds after the first draw from
    /// the perturbed model.
    pub outer_iterations: usize,
    pub noise_half_width: f64,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Decoder observation variance σ².
    pub dec_var: f64,
    /// Divide shaped scores by the proposal density when weighting. With a
    /// high-dimensional Gaussian proposal the density ratio spans tens of
    /// nats and a handful of samples take almost all the weight; switching
    /// this off targets `f(R(x)) p_prop(x)` instead.
    pub proposal_correction: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl TrainConfig {
    /// Settings for the 2-D toy functions.
    ///
    /// A 1-D latent needs about one nat to index position along a curve. With
    /// a larger capacity, or a small decoder variance that lets reconstruction
    /// swamp the KL term, the decoded curve zig-zags across the band of good
    /// samples instead of following its ridge.
    pub fn toy() -> Self {
        Self {
            n_samples: 20_000,
            epochs: 350,
            batch_size: 250,
            lr: 1e-3,
            gamma: 0.1,
            capacity_max: 1.0,
            capacity_warmup_frac: 0.8,
            shaping_alpha: 10.0,
            seed: 0,
            outer_iterations: 1,
            noise_half_width: 0.1,
            latent_dim: 1,
            encoder_hidden: vec![64, 64],
            decoder_hidden: vec![64, 64],
            dec_var: 1.0,
            proposal_correction: true,
        }
    }

    /// Settings for trajectory planning with a 1-D latent.
    pub fn planning() -> Self {
        Self {
            epochs: 700,
            gamma: 10.0,
            capacity_max: 5.0,
            dec_var: 0.05,
            shaping_alpha: 20.0,
            encoder_hidden: vec![300, 200],
            decoder_hidden: vec![200, 300],
            proposal_correction: false,
            ..Self::toy()
        }
    }

    /// Planning settings for a 2-D latent.
    pub fn planning_2d() -> Self {
        Self { latent_dim: 2, shaping_alpha: 10.0, capacity_max: 8.0, ..Self::planning() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_samples", self.n_samples as f64),
            ("epochs", self.epochs as f64),
            ("batch_size", self.batch_size as f64),
            ("lr", self.lr),
            ("gamma", self.gamma),
            ("capacity_max", self.capacity_max),
            ("shaping_alpha", self.shaping_alpha),
            ("outer_iterations", self.outer_iterations as f64),
            ("noise_half_width", self.noise_half_width),
            ("latent_dim", self.latent_dim as f64),
            ("dec_var", self.dec_var),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.capacity_warmup_frac > 0.0 && self.capacity_warmup_frac <= 1.0) {
            return Err(invalid(format!("capacity_warmup_frac must lie in (0, 1], got {}", self.capacity_warmup_frac)));
        }
        if self.n_samples < 2 {
            return Err(invalid("n_samples must be at least 2"));
        }
        if self.encoder_hidden.contains(&0) || self.decoder_hidden.contains(&0) {
            return Err(invalid("hidden layer sizes must be positive"));
        }
        Ok(())
    }
}

/// Encoder `x -> (μ_z, log σ_z²)` and decoder `z -> μ_x` with a fixed
/// isotropic Gaussian likelihood and a standard normal prior on `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldModel {
    encoder: DenseNet,
    decoder: DenseNet,
    latent_dim: usize,
    dec_var: f64,
}

/// Diagonal Gaussian posterior parameters, `latent x batch`.
#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mu: DMatrix<f64>,
    pub logvar: DMatrix<f64>,
}

impl ManifoldModel {
    pub fn new(
        input_dim: usize,
        latent_dim: usize,
        encoder_hidden: &[usize],
        decoder_hidden: &[usize],
        dec_var: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut enc = vec![input_dim];
        enc.extend_from_slice(encoder_hidden);
        enc.push(2 * latent_dim);
        let mut dec = vec![latent_dim];
        dec.extend_from_slice(decoder_hidden);
        dec.push(input_dim);
        let encoder = DenseNet::init(&enc, seed)?;
        let decoder = DenseNet::init(&dec, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?;
        Self::from_parts(encoder, decoder, latent_dim, dec_var)
    }

    pub fn from_parts(encoder: DenseNet, decoder: DenseNet, latent_dim: usize, dec_var: f64) -> Result<Self> {
        if latent_dim == 0 {
            return Err(invalid("latent dimension must be positive"));
        }
        if !(dec_var > 0.0 && dec_var.is_finite()) {
            return Err(invalid(format!("decoder variance must be positive, got {dec_var}")));
        }
        if encoder.output_dim() != 2 * latent_dim {
            return Err(invalid(format!("encoder outputs {} values, expected 2 x {latent_dim}", encoder.output_dim())));
        }
        if decoder.input_dim() != latent_dim {
            return Err(invalid(format!("decoder takes {} inputs, expected {latent_dim}", decoder.input_dim())));
        }
        if decoder.output_dim() != encoder.input_dim() {
            return Err(invalid(format!(
                "decoder outputs {} values but encoder takes {}",
                decoder.output_dim(),
                encoder.input_dim()
            )));
        }
        Ok(Self { encoder, decoder, latent_dim, dec_var })
    }

    pub fn encoder(&self) -> &DenseNet {
        &self.encoder
    }

    pub fn decoder(&self) -> &DenseNet {
        &self.decoder
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn dec_var(&self) -> f64 {
        self.dec_var
    }

    pub fn encode(&self, x: &DMatrix<f64>) -> Result<Posterior> {
        let h = self.encoder.forward(x)?.0;
        if let Some(i) = h.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("encoder produced a non-finite value for sample {}", i / h.nrows())));
        }
        Ok(split_posterior(&h, self.latent_dim))
    }

    /// Decoder means for each latent column.
    pub fn decode(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        self.decoder.predict(z)
    }
}

fn split_posterior(h: &DMatrix<f64>, latent: usize) -> Posterior {
    let mu = h.rows(0, latent).into_owned();
    let logvar = h.rows(latent, latent).map(|v| v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP));
    Posterior { mu, logvar }
}

/// `z = μ + exp(logvar / 2) ⊙ ε`.
pub fn reparameterize(mu: &DMatrix<f64>, logvar: &DMatrix<f64>, eps: &DMatrix<f64>) -> DMatrix<f64> {
    mu.zip_zip_map(logvar, eps, |m, lv, e| m + (0.5 * lv).exp() * e)
}

/// KL divergence of `N(μ, exp(logvar))` from `N(0, 1)`, per channel.
pub fn gaussian_kl(mu: &[f64], logvar: &[f64]) -> Vec<f64> {
    mu.iter().zip(logvar).map(|(m, lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv)).collect()
}

/// `log N(x; dec(z), σ² I)` without the normalising constant.
pub fn recon_loglik(model: &ManifoldModel, x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != model.input_dim() || z.len() != model.latent_dim() {
        return Err(invalid("sample or latent has the wrong dimension"));
    }
    let mean = model.decode(&DMatrix::from_column_slice(z.len(), 1, z));
    let sq: f64 = x.iter().zip(mean.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(-sq / (2.0 * model.dec_var))
}

/// Loss value and gradients for one minibatch.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub encoder: NetGrads,
    pub decoder: NetGrads,
    /// `Σ_i w_i KL_ic / B` for each latent channel.
    pub kl_per_channel: Vec<f64>,
    /// Total KL of every sample, unweighted.
    pub kl_per_sample: Vec<f64>,
    /// `Σ_i w_i ||x_i - dec(z_i)||² / (2σ²) / B`.
    pub recon: f64,
}

/// Weighted capacity loss with exact gradients.
///
/// `x` is `input x B`, `eps` is `latent x B` standard-normal noise. The
/// absolute value uses the sign subgradient, which is zero at the kink.
pub fn weighted_loss(
    model: &ManifoldModel,
    x: &DMatrix<f64>,
    weights: &[f64],
    capacity: f64,
    gamma: f64,
    eps: &DMatrix<f64>,
) -> Result<LossEval> {
    let b = x.ncols();
    let latent = model.latent_dim;
    if weights.len() != b || eps.ncols() != b || eps.nrows() != latent {
        return Err(invalid(format!(
            "batch of {b} samples with {} weights and {}x{} noise",
            weights.len(),
            eps.nrows(),
            eps.ncols()
        )));
    }
    if b == 0 {
        return Err(invalid("empty batch"));
    }
    let inv_b = 1.0 / b as f64;
    let (h, enc_cache) = model.encoder.forward(x)?;
    let post = split_posterior(&h, latent);
    let z = reparameterize(&post.mu, &post.logvar, eps);
    let (xhat, dec_cache) = model.decoder.forward(&z)?;

    let inv_var = 1.0 / model.dec_var;
    let mut loss = 0.0;
    let mut recon_total = 0.0;
    let mut kl_per_channel = vec![0.0; latent];
    let mut kl_per_sample = Vec::with_capacity(b);
    let mut capacity_sign = Vec::with_capacity(b);
    let mut d_xhat = &xhat - x;
    for (i, &wi) in weights.iter().enumerate() {
        let w = wi * inv_b;
        let sq = d_xhat.column(i).norm_squared();
        let recon = 0.5 * sq * inv_var;
        let kl = gaussian_kl(post.mu.column(i).as_slice(), post.logvar.column(i).as_slice());
        let kl_total: f64 = kl.iter().sum();
        let term = w * (recon + gamma * (kl_total - capacity).abs());
        if !term.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at sample {i}")));
        }
        loss += term;
        recon_total += w * recon;
        for (acc, k) in kl_per_channel.iter_mut().zip(&kl) {
            *acc += w * k;
        }
        kl_per_sample.push(kl_total);
        let s = if kl_total > capacity {
            1.0
        } else if kl_total < capacity {
            -1.0
        } else {
            0.0
        };
        capacity_sign.push(w * gamma * s);
        d_xhat.column_mut(i).scale_mut(w * inv_var);
    }

    let (decoder, dz) = model.decoder.backward(&dec_cache, &d_xhat)?;

    let mut dh = DMatrix::zeros(2 * latent, b);
    for i in 0..b {
        let cs = capacity_sign[i];
        for c in 0..latent {
            let mu = post.mu[(c, i)];
            let lv = post.logvar[(c, i)];
            let sd = (0.5 * lv).exp();
            dh[(c, i)] = dz[(c, i)] + cs * mu;
            let raw = h[(latent + c, i)];
            dh[(latent + c, i)] = if raw.abs() < LOGVAR_CLAMP {
                dz[(c, i)] * eps[(c, i)] * 0.5 * sd + cs * 0.5 * (lv.exp() - 1.0)
            } else {
                0.0
            };
        }
    }
    let encoder = model.encoder.backward_params(&enc_cache, &dh)?;

    Ok(LossEval { loss, encoder, decoder, kl_per_channel, kl_per_sample, recon: recon_total })
}

/// Linear ramp from 0 to `capacity_max` over the first
/// `capacity_warmup_frac * epochs` epochs, constant afterwards.
pub fn capacity_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.capacity_warmup_frac * cfg.epochs as f64;
    if warmup <= 0.0 {
        return cfg.capacity_max;
    }
    cfg.capacity_max * (epoch as f64 / warmup).min(1.0)
}

/// Per-epoch training curves.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Weighted mean loss per sample, one entry per epoch.
    pub loss: Vec<f64>,
    /// Weighted mean KL per latent channel, one row per epoch.
    pub kl: Vec<Vec<f64>>,
    pub capacity: Vec<f64>,
    /// Effective sample size of the last weighted batch.
    pub effective_sample_size: f64,
    /// True if a round's raw scores were all equal.
    pub degenerate_batch: bool,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Equality ignoring the wall-clock field.
    pub fn same_curves(&self, other: &Self) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.loss) == bits(&other.loss)
            && self.kl.len() == other.kl.len()
            && self.kl.iter().zip(&other.kl).all(|(a, b)| bits(a) == bits(b))
            && bits(&self.capacity) == bits(&other.capacity)
            && self.effective_sample_size.to_bits() == other.effective_sample_size.to_bits()
            && self.degenerate_batch == other.degenerate_batch
    }
}

// Independent ChaCha streams derived from the config seed.
const STREAM_SAMPLES: u64 = 1;
const STREAM_TRAIN: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Samples from the proposal, scores, weights, and fits a fresh model.
pub fn train(
    objective: &dyn Objective,
    proposal: &dyn Proposal,
    cfg: &TrainConfig,
) -> Result<(ManifoldModel, TrainReport)> {
    cfg.validate()?;
    if objective.dim() != proposal.dim() {
        return Err(invalid(format!(
            "objective has dimension {} but proposal has {}",
            objective.dim(),
            proposal.dim()
        )));
    }
    let started = Instant::now();
    let mut model = ManifoldModel::new(
        objective.dim(),
        cfg.latent_dim,
        &cfg.encoder_hidden,
        &cfg.decoder_hidden,
        cfg.dec_var,
        cfg.seed,
    )?;
    let shaping = ShapingConfig::new(cfg.shaping_alpha)?;
    let mut sample_rng = stream(cfg.seed, STREAM_SAMPLES);
    let mut train_rng = stream(cfg.seed, STREAM_TRAIN);
    let mut report = TrainReport::default();

    for round in 0..cfg.outer_iterations {
        let batch = if round == 0 {
            draw_weighted(objective, proposal, cfg, &mut sample_rng, &shaping)?
        } else {
            let perturbed =
                ModelPerturbation::new(model.clone(), cfg.noise_half_width, cfg.seed.wrapping_add(round as u64))?;
            draw_weighted(objective, &perturbed, cfg, &mut sample_rng, &shaping)?
        };
        report.degenerate_batch |= batch.degenerate;
        report.effective_sample_size = batch.effective_sample_size();
        log::info!("round {round}: {} samples, effective sample size {:.1}", batch.len(), report.effective_sample_size);
        fit(&mut model, &batch, cfg, &mut train_rng, &mut report)?;
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((model, report))
}

fn draw_weighted(
    objective: &dyn Objective,
    proposal: &dyn Proposal,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    shaping: &ShapingConfig,
) -> Result<WeightedBatch> {
    let points = proposal.sample_with(cfg.n_samples, rng);
    let raw = evaluate_columns(objective, &points);
    let mut log_prop = points.column_iter().map(|c| proposal.log_density(c.as_slice())).collect::<Result<Vec<_>>>()?;
    if !cfg.proposal_correction {
        // keep the support: samples the proposal cannot produce stay excluded
        for lp in log_prop.iter_mut().filter(|lp| lp.is_finite()) {
            *lp = 0.0;
        }
    }
    WeightedBatch::build(points, raw, log_prop, shaping)
}

/// Runs `cfg.epochs` epochs of shuffled minibatch Adam on a weighted batch.
pub fn fit(
    model: &mut ManifoldModel,
    batch: &WeightedBatch,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    report: &mut TrainReport,
) -> Result<()> {
    if batch.points.nrows() != model.input_dim() {
        return Err(invalid("batch dimension does not match the model"));
    }
    let n = batch.len();
    let mut enc_opt = Adam::new(&model.encoder, cfg.lr);
    let mut dec_opt = Adam::new(&model.decoder, cfg.lr);
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let capacity = capacity_at(epoch, cfg);
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        let mut epoch_kl = vec![0.0; model.latent_dim];
        for chunk in order.chunks(cfg.batch_size) {
            let x = batch.points.select_columns(chunk);
            let w: Vec<f64> = chunk.iter().map(|&i| batch.weights[i]).collect();
            let eps = standard_normal_matrix(model.latent_dim, chunk.len(), rng);
            let eval = weighted_loss(model, &x, &w, capacity, cfg.gamma, &eps).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}: {m}")),
                other => other,
            })?;
            let share = chunk.len() as f64 / n as f64;
            epoch_loss += eval.loss * share;
            for (acc, k) in epoch_kl.iter_mut().zip(&eval.kl_per_channel) {
                *acc += k * share;
            }
            enc_opt.step(&mut model.encoder, &eval.encoder)?;
            dec_opt.step(&mut model.decoder, &eval.decoder)?;
        }
        log::debug!("epoch {epoch}: loss {epoch_loss:.5}, kl {epoch_kl:?}, capacity {capacity:.3}");
        report.loss.push(epoch_loss);
        report.kl.push(epoch_kl);
        report.capacity.push(capacity);
    }
    Ok(())
}

/// `count` evenly spaced values in `[lo, hi]` per latent axis; with more than
/// one axis the grid is the Cartesian product (first axis varies fastest).
/// A single point sits at the midpoint.
pub fn linear_z_grid(lo: f64, hi: f64, count: usize, latent_dim: usize) -> Result<DMatrix<f64>> {
    if count == 0 || latent_dim == 0 {
        return Err(invalid("z grid needs at least one point and one axis"));
    }
    let axis: Vec<f64> = if count == 1 {
        vec![0.5 * (lo + hi)]
    } else {
        (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
    };
    let total = count.pow(latent_dim as u32);
    Ok(DMatrix::from_fn(latent_dim, total, |d, j| axis[(j / count.pow(d as u32)) % count]))
}

/// Decoder means at the given latent points (one per column).
pub fn sample_manifold(model: &ManifoldModel, z: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.nrows() != model.latent_dim {
        return Err(invalid(format!("latent points have {} rows, model expects {}", z.nrows(), model.latent_dim)));
    }
    Ok(model.decode(z))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldScores {
    pub mean: f64,
    pub std: f64,
    pub scores: Vec<f64>,
}

/// Scores decoder means over `grid_size` points per latent axis spanning
/// [`Z_EVAL_RANGE`].
pub fn evaluate_manifold(model: &ManifoldModel, objective: &dyn Objective, grid_size: usize) -> Result<ManifoldScores> {
    let z = linear_z_grid(Z_EVAL_RANGE.0, Z_EVAL_RANGE.1, grid_size, model.latent_dim)?;
    evaluate_at(model, objective, &z)
}

pub fn evaluate_at(model: &ManifoldModel, objective: &dyn Objective, z: &DMatrix<f64>) -> Result<ManifoldScores> {
    if objective.dim() != model.input_dim() {
        return Err(invalid("objective dimension does not match the model"));
    }
    let points = sample_manifold(model, z)?;
    let scores = evaluate_columns(objective, &points);
    let (mean, std) = mean_std(&scores);
    Ok(ManifoldScores { mean, std, scores })
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}
