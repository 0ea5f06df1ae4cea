//! Objective functions to be maximized, plus the batch-relative score shaping
//! used to build the target density.

use log::warn;
use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{invalid, Result};

/// A scalar objective `R(x)` to be maximized over a box.
///
/// Implementations must be deterministic: the same input always yields the
/// same score.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    /// Closed interval per dimension, `lo < hi`.
    fn bounds(&self) -> Vec<(f64, f64)>;

    fn eval(&self, x: &[f64]) -> f64;
}

/// Evaluates `objective` on every column of `points` (one sample per column).
///
/// Evaluation fans out over the rayon pool; results come back in column order.
pub fn evaluate_columns(objective: &dyn Objective, points: &DMatrix<f64>) -> Vec<f64> {
    (0..points.ncols()).into_par_iter().map(|j| objective.eval(points.column(j).as_slice())).collect()
}

/// The four two-dimensional toy functions. Each has a maximum value of at most
/// one and an extended set of (near-)optimal points.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ToyFunction {
    /// Two circular arcs joined by a line segment.
    PiecewiseLine,
    /// Arc of a large circle centred outside the box.
    Arc,
    /// Piecewise ridge tilted so that a single point is optimal.
    SlopedRidge,
    /// Ring around the centre of the box.
    Ring,
}

impl ToyFunction {
    pub const ALL: [ToyFunction; 4] =
        [ToyFunction::PiecewiseLine, ToyFunction::Arc, ToyFunction::SlopedRidge, ToyFunction::Ring];

    pub fn from_id(id: u32) -> Result<Self> {
        match id {
            1 => Ok(ToyFunction::PiecewiseLine),
            2 => Ok(ToyFunction::Arc),
            3 => Ok(ToyFunction::SlopedRidge),
            4 => Ok(ToyFunction::Ring),
            _ => Err(invalid(format!("toy function id must be 1..=4, got {id}"))),
        }
    }

    pub fn id(self) -> u32 {
        match self {
            ToyFunction::PiecewiseLine => 1,
            ToyFunction::Arc => 2,
            ToyFunction::SlopedRidge => 3,
            ToyFunction::Ring => 4,
        }
    }

    pub fn value(self, x1: f64, x2: f64) -> f64 {
        match self {
            ToyFunction::PiecewiseLine => {
                // The middle-branch denominator is (0.09 + 1)^2, not the
                // point-line normaliser sqrt(0.3^2 + 1).
                let d = if x1 < 0.5 {
                    ((x2 - 1.05).powi(2) + (x1 - 0.5).powi(2)).sqrt()
                } else if x1 < 1.5 {
                    (-0.3 * x1 - x2 + 1.2).abs() / (0.09f64 + 1.0).powi(2)
                } else {
                    ((x2 - 0.75).powi(2) + (x1 - 1.5).powi(2)).sqrt()
                };
                (-d).exp()
            }
            ToyFunction::Arc => {
                let d = ((x2 - 1.5).powi(2) + (x1 + 1.0).powi(2) - 2.5).abs();
                (-d / 10.0).exp()
            }
            ToyFunction::SlopedRidge => {
                let d = if x1 < 0.7 {
                    ((x2 - 0.94).powi(2) + (x1 - 0.7).powi(2)).sqrt()
                } else if x1 < 1.4 {
                    (0.2 * x1 - x2 + 0.8).abs() / (0.04f64 + 1.0).powi(2)
                } else {
                    ((x2 - 1.08).powi(2) + (x1 - 1.4).powi(2)).sqrt()
                };
                (-(d + 0.2 * x2 + 0.14)).exp()
            }
            ToyFunction::Ring => {
                let d = ((x2 - 1.0).powi(2) + (x1 - 1.0).powi(2) - 0.5).abs();
                (-d / 10.0).exp()
            }
        }
    }
}

/// The evaluation box shared by all toy functions.
pub const TOY_BOUNDS: (f64, f64) = (0.0, 2.0);

impl Objective for ToyFunction {
    fn dim(&self) -> usize {
        2
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        vec![TOY_BOUNDS; 2]
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.value(x[0], x[1])
    }
}

pub fn eval_toy(func_id: u32, x: [f64; 2]) -> Result<f64> {
    Ok(ToyFunction::from_id(func_id)?.value(x[0], x[1]))
}

/// Sharpness of the exponential shaping transform.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShapingConfig {
    pub alpha: f64,
}

impl ShapingConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("shaping alpha must be positive, got {alpha}")));
        }
        Ok(Self { alpha })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Shaped {
    pub values: Vec<f64>,
    /// Set when every raw score in the batch was equal.
    pub degenerate: bool,
}

/// `f(R) = exp(alpha * (R - R_max) / (R_max - R_min))` with batch extrema.
///
/// A batch whose scores are all equal maps to all ones.
pub fn shape_scores(raw: &[f64], cfg: &ShapingConfig) -> Result<Shaped> {
    if raw.len() < 2 {
        return Err(invalid(format!("shaping needs at least 2 scores, got {}", raw.len())));
    }
    if let Some(i) = raw.iter().position(|r| !r.is_finite()) {
        return Err(invalid(format!("non-finite raw score {} at index {i}", raw[i])));
    }
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let range = max - min;
    if range <= 0.0 {
        warn!("degenerate batch: all {} scores equal {max}; using uniform shaping", raw.len());
        return Ok(Shaped { values: vec![1.0; raw.len()], degenerate: true });
    }
    let values = raw.iter().map(|&r| (cfg.alpha * (r - max) / range).exp()).collect();
    Ok(Shaped { values, degenerate: false })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMax {
    pub argmax: [f64; 2],
    pub score: f64,
}

/// Exhaustive search over a `resolution x resolution` grid spanning the
/// objective's box (endpoints included). Ties keep the first grid point in
/// row-major order.
pub fn grid_max_2d(objective: &dyn Objective, resolution: usize) -> Result<GridMax> {
    if objective.dim() != 2 {
        return Err(invalid(format!("grid search needs a 2-D objective, got dim {}", objective.dim())));
    }
    if resolution < 100 {
        return Err(invalid(format!("grid resolution must be >= 100, got {resolution}")));
    }
    let b = objective.bounds();
    let coord = |(lo, hi): (f64, f64), i: usize| lo + (hi - lo) * i as f64 / (resolution - 1) as f64;

    let rows: Vec<GridMax> = (0..resolution)
        .into_par_iter()
        .map(|i| {
            let x1 = coord(b[0], i);
            let mut best = GridMax { argmax: [x1, b[1].0], score: f64::NEG_INFINITY };
            for j in 0..resolution {
                let x2 = coord(b[1], j);
                let s = objective.eval(&[x1, x2]);
                if s > best.score {
                    best = GridMax { argmax: [x1, x2], score: s };
                }
            }
            best
        })
        .collect();
    let mut best = rows[0];
    for r in &rows[1..] {
        if r.score > best.score {
            best = *r;
        }
    }
    Ok(best)
}

pub fn grid_max(func_id: u32, resolution: usize) -> Result<GridMax> {
    grid_max_2d(&ToyFunction::from_id(func_id)?, resolution)
}
