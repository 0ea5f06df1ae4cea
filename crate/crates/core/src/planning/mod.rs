//! 2D point-robot motion planning: world model, trajectory cost with its
//! analytic gradient, CHOMP fine-tuning, and the pipeline that learns a
//! manifold of trajectories from a smoothness prior.

mod chomp;
mod cost;
mod pipeline;
mod world;

pub use chomp::{chomp_update, fine_tune, Chomp, ChompConfig, FineTuneResult};
pub use cost::{
    collision_free, cost_gradient, local_collision_cost, local_collision_slope, trajectory_cost, CostBreakdown,
    CostConfig, Trajectory, DEFAULT_DT,
};
pub use pipeline::{
    decode_trajectories, plan_with_manifold, straight_line_interior, PlanResult, PriorConfig, TrajectoryObjective,
};
pub use world::{signed_distance, Obstacle, World2D, WORLD_SCHEMA_VERSION};

/// Configuration-space dimension of the point robot.
pub const DOF: usize = 2;
