//! Cross-entropy method with a diagonal Gaussian-mixture sampler.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::objective::Objective;
use crate::proposal::log_sum_exp;

pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
}

impl GaussianMixture {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    /// Simplex weights and floored variances.
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-12 || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Numeric(format!("mixture weights do not form a simplex (sum {sum})")));
        }
        if self.variances.iter().flatten().any(|v| !(*v >= VARIANCE_FLOOR)) {
            return Err(Error::Numeric("mixture variance below floor".into()));
        }
        Ok(())
    }

    fn component_log_density(&self, c: usize, x: &[f64]) -> f64 {
        let mut acc = 0.0;
        for ((xi, m), v) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
            acc += (xi - m).powi(2) / v + v.ln() + LN_2PI;
        }
        -0.5 * acc
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        let terms: Vec<f64> = (0..self.k()).map(|c| self.weights[c].ln() + self.component_log_density(c, x)).collect();
        log_sum_exp(&terms)
    }

    /// Mean log-density over `points`.
    pub fn mean_log_likelihood(&self, points: &[Vec<f64>]) -> f64 {
        points.iter().map(|p| self.log_density(p)).sum::<f64>() / points.len() as f64
    }

    pub fn sample_with(&self, n: usize, rng: &mut dyn RngCore) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut c = self.k() - 1;
            for (i, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    c = i;
                    break;
                }
            }
            let x = self.means[c]
                .iter()
                .zip(&self.variances[c])
                .map(|(m, v)| m + v.sqrt() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            out.push(x);
        }
        out
    }
}

/// Result of [`em_fit`], with the mean log-likelihood before each M-step and
/// after the final one.
#[derive(Clone, Debug)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood: Vec<f64>,
    pub reseeded: usize,
}

fn column_variance(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len() as f64;
    let dim = points[0].len();
    (0..dim)
        .map(|d| {
            let m = points.iter().map(|p| p[d]).sum::<f64>() / n;
            (points.iter().map(|p| (p[d] - m).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR)
        })
        .collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// k-means++ style seeding: first centre uniform, the rest with probability
/// proportional to squared distance from the nearest chosen centre.
fn seed_means(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut means = vec![points[rng.random_range(0..n)].clone()];
    let mut nearest: Vec<f64> = points.iter().map(|p| sq_dist(p, &means[0])).collect();
    while means.len() < k {
        let total: f64 = nearest.iter().sum();
        let idx = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                acc += d;
                if acc > target {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        let m = points[idx].clone();
        for (d, p) in nearest.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &m));
        }
        means.push(m);
    }
    means
}

/// Expectation-maximisation for a `k`-component diagonal mixture.
///
/// Components whose responsibilities vanish are re-seeded at a random point
/// with the pooled data variance.
pub fn em_fit(points: &[Vec<f64>], k: usize, iterations: usize, seed: u64) -> Result<EmFit> {
    if k == 0 {
        return Err(invalid("mixture needs at least one component"));
    }
    if points.len() < k {
        return Err(invalid(format!("{} points cannot support {k} components", points.len())));
    }
    let dim = points[0].len();
    if dim == 0 || points.iter().any(|p| p.len() != dim) {
        return Err(invalid("points must share a positive dimension"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pooled = column_variance(points);
    let mut mix = GaussianMixture {
        weights: vec![1.0 / k as f64; k],
        means: seed_means(points, k, &mut rng),
        variances: vec![pooled.clone(); k],
    };
    let n = points.len();
    let mut resp = vec![0.0; n * k];
    let mut trace = Vec::with_capacity(iterations + 1);
    let mut reseeded = 0;
    let mut terms = vec![0.0; k];
    for _ in 0..iterations {
        // E-step
        let mut ll = 0.0;
        for (i, p) in points.iter().enumerate() {
            for (c, t) in terms.iter_mut().enumerate() {
                *t = mix.weights[c].ln() + mix.component_log_density(c, p);
            }
            let norm = log_sum_exp(&terms);
            ll += norm;
            for c in 0..k {
                resp[i * k + c] = (terms[c] - norm).exp();
            }
        }
        trace.push(ll / n as f64);

        // M-step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
            if nk < 1e-10 {
                log::debug!("re-seeding empty mixture component {c}");
                reseeded += 1;
                mix.means[c] = points[rng.random_range(0..n)].clone();
                mix.variances[c] = pooled.clone();
                mix.weights[c] = nk.max(1e-12) / n as f64;
                continue;
            }
            let mut mean = vec![0.0; dim];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + c];
                for d in 0..dim {
                    mean[d] += r * p[d];
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk);
            let mut var = vec![0.0; dim];
            for (i, p) in points.iter().enumerate() {
                let r = resp[i * k + c];
                for d in 0..dim {
                    var[d] += r * (p[d] - mean[d]).powi(2);
                }
            }
            var.iter_mut().for_each(|v| *v = (*v / nk).max(VARIANCE_FLOOR));
            mix.means[c] = mean;
            mix.variances[c] = var;
            mix.weights[c] = nk / n as f64;
        }
        let total: f64 = mix.weights.iter().sum();
        mix.weights.iter_mut().for_each(|w| *w /= total);
    }
    trace.push(mix.mean_log_likelihood(points));
    Ok(EmFit { mixture: mix, log_likelihood: trace, reseeded })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CemConfig {
    pub k: usize,
    pub population: usize,
    pub elite_fraction: f64,
    pub iterations: usize,
    pub em_iterations: usize,
    pub seed: u64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self { k: 20, population: 2000, elite_fraction: 0.1, iterations: 50, em_iterations: 20, seed: 0 }
    }
}

impl CemConfig {
    pub fn elite_count(&self) -> usize {
        (self.population as f64 * self.elite_fraction).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.elite_fraction > 0.0 && self.elite_fraction < 1.0) {
            return Err(invalid(format!("elite fraction must lie in (0, 1), got {}", self.elite_fraction)));
        }
        if self.k == 0 || self.iterations == 0 || self.em_iterations == 0 {
            return Err(invalid("k, iterations and em_iterations must be positive"));
        }
        if self.elite_count() < self.k {
            return Err(invalid(format!("{} elites cannot support {} components", self.elite_count(), self.k)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CemIteration {
    /// Lowest score among the elites.
    pub elite_threshold: f64,
    pub best_score: f64,
    pub mean_elite_score: f64,
}

#[derive(Clone, Debug)]
pub struct CemResult {
    pub mixture: GaussianMixture,
    /// Objective value at each component mean.
    pub scores: Vec<f64>,
    pub history: Vec<CemIteration>,
    /// Set when the elite set collapsed to a single point.
    pub stopped_early: bool,
}

impl CemResult {
    pub fn best_component(&self) -> (usize, f64) {
        self.scores
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, s)| if s > best.1 { (i, s) } else { best })
    }

    pub fn mean_component_score(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

fn clip(x: &mut [f64], bounds: &[(f64, f64)]) {
    for (v, (lo, hi)) in x.iter_mut().zip(bounds) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Sample from the mixture (clipped to the box), keep the top elites, refit.
pub fn cem_optimize(objective: &dyn Objective, cfg: &CemConfig) -> Result<CemResult> {
    cfg.validate()?;
    let bounds = objective.bounds();
    let dim = objective.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mixture = GaussianMixture {
        weights: vec![1.0 / cfg.k as f64; cfg.k],
        means: (0..cfg.k).map(|_| bounds.iter().map(|(lo, hi)| rng.random_range(*lo..*hi)).collect()).collect(),
        variances: vec![bounds.iter().map(|(lo, hi)| ((hi - lo) / 4.0).powi(2)).collect(); cfg.k],
    };
    let n_elite = cfg.elite_count();
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut stopped_early = false;
    for it in 0..cfg.iterations {
        let mut pop = mixture.sample_with(cfg.population, &mut rng);
        for x in &mut pop {
            clip(x, &bounds);
        }
        let scores: Vec<f64> = pop.iter().map(|x| objective.eval(x)).collect();
        let mut order: Vec<usize> = (0..pop.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let elites: Vec<Vec<f64>> = order[..n_elite].iter().map(|&i| pop[i].clone()).collect();
        let elite_scores: Vec<f64> = order[..n_elite].iter().map(|&i| scores[i]).collect();
        history.push(CemIteration {
            elite_threshold: elite_scores[n_elite - 1],
            best_score: elite_scores[0],
            mean_elite_score: elite_scores.iter().sum::<f64>() / n_elite as f64,
        });
        if elites.iter().all(|e| e == &elites[0]) {
            log::info!("elite set collapsed at iteration {it}; stopping");
            stopped_early = true;
            break;
        }
        let fit = em_fit(&elites, cfg.k, cfg.em_iterations, cfg.seed.wrapping_add(it as u64 + 1))?;
        mixture = fit.mixture;
    }
    debug_assert_eq!(mixture.dim(), dim);
    let scores = mixture
        .means
        .iter()
        .map(|m| {
            let mut x = m.clone();
            clip(&mut x, &bounds);
            objective.eval(&x)
        })
        .collect();
    Ok(CemResult { mixture, scores, history, stopped_early })
}
