use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::cost::{trajectory_cost, CostConfig, Trajectory, DEFAULT_DT};
use super::world::World2D;
use super::DOF;
use crate::error::{invalid, Result};
use crate::lsmo::{sample_manifold, train, ManifoldModel, TrainConfig, TrainReport};
use crate::objective::Objective;
use crate::proposal::TrajectoryPrior;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// Interior waypoints per trajectory.
    pub steps: usize,
    /// Peak marginal variance `a` of the trajectory prior.
    pub scale: f64,
    /// Time between consecutive waypoints.
    pub dt: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { steps: 50, scale: 0.25, dt: DEFAULT_DT }
    }
}

/// `R(ξ) = −C(ξ)` over flat interior waypoints.
#[derive(Clone, Debug)]
pub struct TrajectoryObjective {
    world: World2D,
    cost: CostConfig,
    start: [f64; 2],
    goal: [f64; 2],
    steps: usize,
    dt: f64,
}

impl TrajectoryObjective {
    pub fn new(
        world: World2D,
        cost: CostConfig,
        start: [f64; 2],
        goal: [f64; 2],
        steps: usize,
        dt: f64,
    ) -> Result<Self> {
        if steps == 0 {
            return Err(invalid("trajectory needs at least one interior waypoint"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { world, cost, start, goal, steps, dt })
    }

    pub fn trajectory(&self, flat: &[f64]) -> Result<Trajectory> {
        Trajectory::from_flat(self.start, self.goal, flat, self.dt)
    }
}

impl Objective for TrajectoryObjective {
    fn dim(&self) -> usize {
        self.steps * DOF
    }

    fn bounds(&self) -> Vec<(f64, f64)> {
        let mut b = Vec::with_capacity(self.dim());
        for [lo, hi] in self.world.bounds {
            b.extend(std::iter::repeat_n((lo, hi), self.steps));
        }
        b
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match self.trajectory(x) {
            Ok(t) => -trajectory_cost(&self.world, &t, &self.cost).total,
            Err(_) => f64::NEG_INFINITY,
        }
    }
}

/// Interior points of the uniform straight line, flat in per-DoF blocks.
pub fn straight_line_interior(start: [f64; 2], goal: [f64; 2], steps: usize) -> Result<DVector<f64>> {
    if steps == 0 {
        return Err(invalid("trajectory needs at least one interior waypoint"));
    }
    Ok(DVector::from_fn(steps * DOF, |i, _| {
        let (d, t) = (i / steps, i % steps);
        let s = (t + 1) as f64 / (steps + 1) as f64;
        start[d] + s * (goal[d] - start[d])
    }))
}

#[derive(Clone, Debug)]
pub struct PlanResult {
    pub model: ManifoldModel,
    pub report: TrainReport,
    pub prior: TrajectoryPrior,
}

/// Learns a manifold of trajectories: the prior is centred on the straight
/// line from `start` to `goal`, samples are scored by `−C(ξ)`, and the model
/// is trained on the weighted samples.
pub fn plan_with_manifold(
    world: &World2D,
    start: [f64; 2],
    goal: [f64; 2],
    train_cfg: &TrainConfig,
    prior_cfg: &PriorConfig,
    cost_cfg: &CostConfig,
) -> Result<PlanResult> {
    let xi0 = straight_line_interior(start, goal, prior_cfg.steps)?;
    let prior = TrajectoryPrior::new(prior_cfg.steps, DOF, prior_cfg.scale, xi0)?;
    let objective = TrajectoryObjective::new(world.clone(), *cost_cfg, start, goal, prior_cfg.steps, prior_cfg.dt)?;
    let (model, report) = train(&objective, &prior, train_cfg)?;
    Ok(PlanResult { model, report, prior })
}

/// Decodes each latent column into a full trajectory with the given endpoints.
pub fn decode_trajectories(
    model: &ManifoldModel,
    start: [f64; 2],
    goal: [f64; 2],
    dt: f64,
    z: &DMatrix<f64>,
) -> Result<Vec<Trajectory>> {
    let x = sample_manifold(model, z)?;
    x.column_iter().map(|c| Trajectory::from_flat(start, goal, c.as_slice(), dt)).collect()
}
