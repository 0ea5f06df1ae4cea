use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use super::cost::{cost_gradient, trajectory_cost, CostConfig, Trajectory};
use super::world::World2D;
use crate::error::{invalid, Error, Result};
use crate::proposal::build_fd_matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChompConfig {
    /// Trust-region weight `η`; larger means smaller steps.
    pub eta: f64,
    pub max_iters: usize,
    /// Stop once the largest waypoint change falls below this.
    pub tol: f64,
}

impl Default for ChompConfig {
    fn default() -> Self {
        Self { eta: 100.0, max_iters: 2000, tol: 1e-4 }
    }
}

/// Covariant gradient step `ξ ← ξ − A⁻¹ g / η` with `A = KᵀK`, the
/// smoothness metric of a `T`-waypoint trajectory.
#[derive(Clone, Debug)]
pub struct Chomp {
    cfg: ChompConfig,
    metric: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

impl Chomp {
    pub fn new(steps: usize, cfg: ChompConfig) -> Result<Self> {
        if !(cfg.eta > 0.0 && cfg.eta.is_finite()) {
            return Err(invalid(format!("eta must be positive, got {}", cfg.eta)));
        }
        let k = build_fd_matrix(steps)?;
        let metric = k.transpose() * &k;
        let factor = Cholesky::new(metric.clone())
            .ok_or_else(|| Error::Internal("Cholesky of the CHOMP metric failed".into()))?;
        Ok(Self { cfg, metric, factor })
    }

    pub fn config(&self) -> &ChompConfig {
        &self.cfg
    }

    pub fn steps(&self) -> usize {
        self.metric.nrows()
    }

    /// The metric `A`.
    pub fn metric(&self) -> &DMatrix<f64> {
        &self.metric
    }

    /// `δ = A⁻¹ g / η`, solved per DoF (per column of `grad`).
    pub fn step(&self, grad: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(grad) / self.cfg.eta
    }
}

/// One CHOMP update; endpoints are untouched.
pub fn chomp_update(traj: &Trajectory, grad: &DMatrix<f64>, chomp: &Chomp) -> Result<Trajectory> {
    if grad.shape() != traj.interior.shape() || chomp.steps() != traj.steps() {
        return Err(invalid(format!(
            "gradient {:?} / metric {} do not match a trajectory of {} waypoints",
            grad.shape(),
            chomp.steps(),
            traj.steps()
        )));
    }
    let delta = chomp.step(grad);
    Ok(traj.with_interior(&traj.interior - delta))
}

#[derive(Clone, Debug)]
pub struct FineTuneResult {
    /// Last accepted iterate, which is also the lowest-cost one.
    pub trajectory: Trajectory,
    /// Number of attempted updates, including rejected ones.
    pub iterations: usize,
    pub final_cost: f64,
    pub converged: bool,
    /// Total cost at the start and after every accepted update.
    pub cost_history: Vec<f64>,
}

/// Largest factor by which rejected steps may inflate `η`.
const MAX_ETA_INFLATION: f64 = 1e6;
/// Per accepted step, the inflation of `η` decays by this factor.
const ETA_RELAX: f64 = 0.8;

/// Repeats gradient + CHOMP update until an accepted step moves no waypoint
/// by more than `tol`, or the iteration budget runs out.
///
/// A step that raises the cost is rejected and retried with `η` doubled;
/// every accepted step lets `η` relax back towards the configured value.
/// Each attempt, accepted or not, counts as one iteration.
pub fn fine_tune(world: &World2D, traj: &Trajectory, cost_cfg: &CostConfig, chomp: &Chomp) -> Result<FineTuneResult> {
    let cfg = *chomp.config();
    let mut current = traj.clone();
    let mut cost = trajectory_cost(world, &current, cost_cfg).total;
    let mut history = vec![cost];
    let mut iterations = 0;
    let mut inflation = 1.0;
    let mut direction = chomp.step(&cost_gradient(world, &current, cost_cfg));
    let mut converged = direction.amax() < cfg.tol;
    while !converged && iterations < cfg.max_iters {
        iterations += 1;
        let delta = &direction / inflation;
        let candidate = current.with_interior(&current.interior - &delta);
        let candidate_cost = trajectory_cost(world, &candidate, cost_cfg).total;
        if candidate_cost <= cost {
            current = candidate;
            cost = candidate_cost;
            history.push(cost);
            converged = delta.amax() < cfg.tol;
            inflation = (inflation * ETA_RELAX).max(1.0);
            direction = chomp.step(&cost_gradient(world, &current, cost_cfg));
        } else if inflation < MAX_ETA_INFLATION {
            inflation *= 2.0;
        } else {
            log::debug!("fine_tune: no decrease even at eta x {inflation}");
            break;
        }
    }
    if !converged {
        log::debug!("fine_tune stopped after {iterations} iterations without converging");
    }
    Ok(FineTuneResult { trajectory: current, iterations, final_cost: cost, converged, cost_history: history })
}
