//! Proposal distributions and self-normalised importance weights.
//!
//! Samples are stored one per column: a batch of `n` points in `dim`
//! dimensions is a `dim x n` matrix.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::lsmo::ManifoldModel;
use crate::objective::{shape_scores, ShapingConfig};

pub trait Proposal {
    fn dim(&self) -> usize;

    fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<f64>;

    /// Log-density up to an additive constant shared by every point.
    /// Points outside the support give `-inf`.
    fn log_density(&self, x: &[f64]) -> Result<f64>;

    /// Draws `n` i.i.d. samples; bitwise reproducible for a fixed seed.
    fn sample(&self, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(n, &mut rng)
    }
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(invalid(format!("point has dimension {}, proposal expects {expected}", x.len())));
    }
    Ok(())
}

/// Uniform distribution over an axis-aligned box.
#[derive(Clone, Debug)]
pub struct BoxUniform {
    bounds: Vec<(f64, f64)>,
}

impl BoxUniform {
    pub fn new(bounds: Vec<(f64, f64)>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(invalid("box must have at least one dimension"));
        }
        if let Some((d, b)) = bounds.iter().enumerate().find(|(_, (lo, hi))| !(lo < hi)) {
            return Err(invalid(format!("bounds for dimension {d} are not increasing: {b:?}")));
        }
        Ok(Self { bounds })
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }
}

impl Proposal for BoxUniform {
    fn dim(&self) -> usize {
        self.bounds.len()
    }

    fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), n);
        for j in 0..n {
            for (d, &(lo, hi)) in self.bounds.iter().enumerate() {
                out[(d, j)] = lo + (hi - lo) * rng.random::<f64>();
            }
        }
        out
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let inside = x.iter().zip(&self.bounds).all(|(v, (lo, hi))| v >= lo && v <= hi);
        Ok(if inside { 0.0 } else { f64::NEG_INFINITY })
    }
}

/// Independent normal per coordinate.
#[derive(Clone, Debug)]
pub struct DiagonalNormal {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl DiagonalNormal {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(invalid(format!("mean has {} entries, std has {}", mean.len(), std.len())));
        }
        if std.iter().any(|s| !(*s > 0.0)) {
            return Err(invalid("standard deviations must be positive"));
        }
        Ok(Self { mean, std })
    }
}

impl Proposal for DiagonalNormal {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim(), n);
        for j in 0..n {
            for d in 0..self.dim() {
                let e: f64 = rng.sample(StandardNormal);
                out[(d, j)] = self.mean[d] + self.std[d] * e;
            }
        }
        out
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        Ok(-0.5 * x.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| ((v - m) / s).powi(2)).sum::<f64>())
    }
}

/// Second-difference operator on `steps` interior waypoints, padded with two
/// zeros on each side. Shape `(steps + 2) x steps`; column `t` holds the
/// stencil `[1, -2, 1]` starting at row `t`.
pub fn build_fd_matrix(steps: usize) -> Result<DMatrix<f64>> {
    if steps == 0 {
        return Err(invalid("finite-difference matrix needs at least one waypoint"));
    }
    let mut k = DMatrix::zeros(steps + 2, steps);
    for t in 0..steps {
        k[(t, t)] = 1.0;
        k[(t + 1, t)] = -2.0;
        k[(t + 2, t)] = 1.0;
    }
    Ok(k)
}

/// Smoothness-structured Gaussian over trajectories, `N(xi0, a * (I_D ⊗ R))`
/// where `R` is the inverse of `A = KᵀK` rescaled to unit peak variance.
///
/// Trajectories are flat vectors of `steps * dofs` entries laid out in
/// per-DoF blocks: entry `d * steps + t` is waypoint `t` of DoF `d`.
/// Only interior waypoints are represented, so start and goal never move.
#[derive(Clone, Debug)]
pub struct TrajectoryPrior {
    steps: usize,
    dofs: usize,
    scale: f64,
    fd: DMatrix<f64>,
    precision: DMatrix<f64>,
    cov: DMatrix<f64>,
    /// Precision of `cov` (i.e. `A` times the normalisation constant).
    cov_precision: DMatrix<f64>,
    cov_factor: DMatrix<f64>,
    precision_factor: Cholesky<f64, Dyn>,
    mean: DVector<f64>,
}

impl TrajectoryPrior {
    pub fn new(steps: usize, dofs: usize, scale: f64, mean: DVector<f64>) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(invalid(format!("prior scale must be positive, got {scale}")));
        }
        if dofs == 0 {
            return Err(invalid("trajectory prior needs at least one DoF"));
        }
        if mean.len() != steps * dofs {
            return Err(invalid(format!("mean trajectory has {} entries, expected {steps} x {dofs}", mean.len())));
        }
        let fd = build_fd_matrix(steps)?;
        let precision = fd.transpose() * &fd;
        let precision_factor = Cholesky::new(precision.clone())
            .ok_or_else(|| Error::Internal("Cholesky of the smoothness precision failed".into()))?;
        // A is invertible, so its pseudo-inverse is the inverse.
        let inv = precision_factor.inverse();
        let peak = inv.diagonal().max();
        let mut cov = inv / peak;
        cov = (&cov + cov.transpose()) * 0.5;
        let cov_factor = Cholesky::new(cov.clone())
            .ok_or_else(|| Error::Internal("Cholesky of the trajectory covariance failed".into()))?
            .l();
        let cov_precision = &precision * peak;
        Ok(Self { steps, dofs, scale, fd, precision, cov, cov_precision, cov_factor, precision_factor, mean })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dofs(&self) -> usize {
        self.dofs
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// `K`, `(steps + 2) x steps`.
    pub fn fd_matrix(&self) -> &DMatrix<f64> {
        &self.fd
    }

    /// `A = KᵀK`.
    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    /// Cholesky factorisation of `A`, reused by CHOMP.
    pub fn precision_factor(&self) -> &Cholesky<f64, Dyn> {
        &self.precision_factor
    }

    /// Normalised covariance `R` (unit maximum diagonal), per DoF.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Full sampling covariance `a * (I_D ⊗ R)`.
    pub fn full_covariance(&self) -> DMatrix<f64> {
        let n = self.steps * self.dofs;
        let mut full = DMatrix::zeros(n, n);
        for d in 0..self.dofs {
            let o = d * self.steps;
            full.view_mut((o, o), (self.steps, self.steps)).copy_from(&(&self.cov * self.scale));
        }
        full
    }
}

impl Proposal for TrajectoryPrior {
    fn dim(&self) -> usize {
        self.steps * self.dofs
    }

    fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
        let t = self.steps;
        let std = self.scale.sqrt();
        let mut eps = DMatrix::<f64>::zeros(t, self.dofs * n);
        for v in eps.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let correlated = &self.cov_factor * eps;
        let mut out = DMatrix::zeros(self.dim(), n);
        for j in 0..n {
            for d in 0..self.dofs {
                let src = correlated.column(j * self.dofs + d);
                for i in 0..t {
                    out[(d * t + i, j)] = self.mean[d * t + i] + std * src[i];
                }
            }
        }
        out
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        let t = self.steps;
        let mut quad = 0.0;
        for d in 0..self.dofs {
            let r = DVector::from_iterator(t, (0..t).map(|i| x[d * t + i] - self.mean[d * t + i]));
            quad += r.dot(&(&self.cov_precision * &r));
        }
        Ok(-quad / (2.0 * self.scale))
    }
}

pub fn build_prior(steps: usize, dofs: usize, scale: f64, mean: DVector<f64>) -> Result<TrajectoryPrior> {
    TrajectoryPrior::new(steps, dofs, scale, mean)
}

/// Number of decoded prior draws in the mixture surrogate used as the
/// log-density of [`ModelPerturbation`].
pub const PERTURBATION_MIXTURE_SIZE: usize = 32;

/// Samples `x + u` with `x` decoded from a prior latent draw and `u` uniform
/// on `[-w, w]` per coordinate.
///
/// The exact density of this sampler is intractable; `log_density` uses an
/// isotropic Gaussian mixture of width `w` centred on a fixed set of decoded
/// prior draws.
#[derive(Clone, Debug)]
pub struct ModelPerturbation {
    model: ManifoldModel,
    half_width: f64,
    centres: DMatrix<f64>,
}

impl ModelPerturbation {
    pub fn new(model: ManifoldModel, half_width: f64, seed: u64) -> Result<Self> {
        if !(half_width >= 0.0 && half_width.is_finite()) {
            return Err(invalid(format!("noise half-width must be non-negative, got {half_width}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = standard_normal_matrix(model.latent_dim(), PERTURBATION_MIXTURE_SIZE, &mut rng);
        let centres = model.decode(&z);
        Ok(Self { model, half_width, centres })
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }
}

impl Proposal for ModelPerturbation {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
        let z = standard_normal_matrix(self.model.latent_dim(), n, rng);
        let mut x = self.model.decode(&z);
        let w = self.half_width;
        for v in x.iter_mut() {
            *v += w * (2.0 * rng.random::<f64>() - 1.0);
        }
        x
    }

    fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x)?;
        if self.half_width <= 0.0 {
            return Err(invalid("perturbation density needs a positive noise half-width"));
        }
        let inv = 1.0 / (2.0 * self.half_width * self.half_width);
        let terms: Vec<f64> = self
            .centres
            .column_iter()
            .map(|c| -inv * c.iter().zip(x).map(|(m, v)| (v - m).powi(2)).sum::<f64>())
            .collect();
        Ok(log_sum_exp(&terms) - (terms.len() as f64).ln())
    }
}

/// Draws `n` perturbed model samples with their surrogate log-densities.
pub fn perturb_model_proposal(
    model: &ManifoldModel,
    n: usize,
    half_width: f64,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<f64>)> {
    if !(half_width > 0.0) {
        return Err(invalid(format!("noise half-width must be positive, got {half_width}")));
    }
    let proposal = ModelPerturbation::new(model.clone(), half_width, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let x = proposal.sample_with(n, &mut rng);
    let logp = x.column_iter().map(|c| proposal.log_density(c.as_slice())).collect::<Result<Vec<_>>>()?;
    Ok((x, logp))
}

pub(crate) fn standard_normal_matrix(rows: usize, cols: usize, rng: &mut dyn RngCore) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(rows, cols);
    for v in m.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    m
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `w_i ∝ shaped_i / p_prop(x_i)`, rescaled so the weights average to one.
pub fn compute_weights(shaped: &[f64], log_prop: &[f64]) -> Result<Vec<f64>> {
    if shaped.len() != log_prop.len() {
        return Err(invalid(format!("{} shaped scores but {} log-densities", shaped.len(), log_prop.len())));
    }
    if shaped.len() < 2 {
        return Err(invalid("weighting needs at least 2 samples"));
    }
    if let Some(i) = log_prop.iter().position(|l| !l.is_finite()) {
        return Err(invalid(format!("log-density at index {i} is not finite")));
    }
    let max_log = log_prop.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = shaped.iter().zip(log_prop).map(|(s, l)| s * (max_log - l).exp()).collect();
    let total: f64 = raw.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::DegenerateBatch(format!("importance weights sum to {total}")));
    }
    let scale = raw.len() as f64 / total;
    Ok(raw.into_iter().map(|w| w * scale).collect())
}

/// Scored and weighted samples ready for training.
#[derive(Clone, Debug)]
pub struct WeightedBatch {
    /// `dim x n`, one sample per column.
    pub points: DMatrix<f64>,
    pub raw: Vec<f64>,
    pub shaped: Vec<f64>,
    pub log_prop: Vec<f64>,
    pub weights: Vec<f64>,
    /// Every raw score in the batch was equal.
    pub degenerate: bool,
}

impl WeightedBatch {
    /// Shapes `raw`, then weights by the inverse proposal density. Samples
    /// with a non-finite score or log-density are dropped first.
    pub fn build(points: DMatrix<f64>, raw: Vec<f64>, log_prop: Vec<f64>, shaping: &ShapingConfig) -> Result<Self> {
        if points.ncols() != raw.len() || raw.len() != log_prop.len() {
            return Err(invalid(format!(
                "{} points, {} scores, {} log-densities",
                points.ncols(),
                raw.len(),
                log_prop.len()
            )));
        }
        let keep: Vec<usize> = (0..raw.len()).filter(|&i| raw[i].is_finite() && log_prop[i].is_finite()).collect();
        let (points, raw, log_prop) = if keep.len() == raw.len() {
            (points, raw, log_prop)
        } else {
            log::warn!("dropping {} samples outside the proposal support", raw.len() - keep.len());
            (
                points.select_columns(&keep),
                keep.iter().map(|&i| raw[i]).collect(),
                keep.iter().map(|&i| log_prop[i]).collect(),
            )
        };
        let shaped = shape_scores(&raw, shaping)?;
        let weights = compute_weights(&shaped.values, &log_prop)?;
        Ok(Self { points, raw, shaped: shaped.values, log_prop, weights, degenerate: shaped.degenerate })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// `(Σw)² / Σw²`.
    pub fn effective_sample_size(&self) -> f64 {
        let s: f64 = self.weights.iter().sum();
        let s2: f64 = self.weights.iter().map(|w| w * w).sum();
        s * s / s2
    }
}
