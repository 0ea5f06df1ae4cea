use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::world::World2D;
use super::DOF;
use crate::error::{invalid, Result};

/// Default time between consecutive waypoints.
pub const DEFAULT_DT: f64 = 0.1;

/// A path with fixed endpoints and `T` free interior waypoints.
///
/// `interior` is `T x 2`; its column-major storage is the flat parameter
/// vector in per-DoF blocks used by the trajectory prior.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    start: [f64; 2],
    goal: [f64; 2],
    pub interior: DMatrix<f64>,
    pub dt: f64,
}

impl Trajectory {
    pub fn new(start: [f64; 2], goal: [f64; 2], interior: DMatrix<f64>, dt: f64) -> Result<Self> {
        if interior.ncols() != DOF || interior.nrows() == 0 {
            return Err(invalid(format!(
                "interior must be T x {DOF} with T >= 1, got {}x{}",
                interior.nrows(),
                interior.ncols()
            )));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(invalid(format!("time step must be positive, got {dt}")));
        }
        if interior.iter().any(|v| !v.is_finite()) {
            return Err(invalid("interior waypoints must be finite"));
        }
        Ok(Self { start, goal, interior, dt })
    }

    /// Interior laid out as `[x_1..x_T, y_1..y_T]`.
    pub fn from_flat(start: [f64; 2], goal: [f64; 2], flat: &[f64], dt: f64) -> Result<Self> {
        if !flat.len().is_multiple_of(DOF) || flat.is_empty() {
            return Err(invalid(format!("flat trajectory length {} is not a multiple of {DOF}", flat.len())));
        }
        Self::new(start, goal, DMatrix::from_column_slice(flat.len() / DOF, DOF, flat), dt)
    }

    /// Uniformly spaced waypoints on the segment from `start` to `goal`,
    /// with the default time step.
    pub fn straight_line(start: [f64; 2], goal: [f64; 2], steps: usize) -> Result<Self> {
        let flat = super::pipeline::straight_line_interior(start, goal, steps)?;
        Self::from_flat(start, goal, flat.as_slice(), DEFAULT_DT)
    }

    pub fn start(&self) -> [f64; 2] {
        self.start
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn steps(&self) -> usize {
        self.interior.nrows()
    }

    pub fn flat(&self) -> &[f64] {
        self.interior.as_slice()
    }

    /// Start, interior waypoints, goal.
    pub fn points(&self) -> Vec<[f64; 2]> {
        let mut pts = Vec::with_capacity(self.steps() + 2);
        pts.push(self.start);
        pts.extend((0..self.steps()).map(|t| [self.interior[(t, 0)], self.interior[(t, 1)]]));
        pts.push(self.goal);
        pts
    }

    pub fn with_interior(&self, interior: DMatrix<f64>) -> Self {
        Self { interior, ..self.clone() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostConfig {
    /// Weight of the squared-acceleration term.
    pub smooth_weight: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self { smooth_weight: 1e-3 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    pub obstacle: f64,
    pub smoothness: f64,
    pub total: f64,
}

/// Zero beyond the margin, quadratic inside it, linear in penetration.
pub fn local_collision_cost(d: f64, eps: f64) -> f64 {
    if d > eps {
        0.0
    } else if d >= 0.0 {
        (d - eps).powi(2) / (2.0 * eps)
    } else {
        -d + 0.5 * eps
    }
}

/// Derivative of [`local_collision_cost`] with respect to `d`.
pub fn local_collision_slope(d: f64, eps: f64) -> f64 {
    if d > eps {
        0.0
    } else if d >= 0.0 {
        (d - eps) / eps
    } else {
        -1.0
    }
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: [f64; 2]) -> f64 {
    a[0].hypot(a[1])
}

/// Velocities along the full point sequence: central differences inside,
/// one-sided at the two endpoints.
fn velocities(pts: &[[f64; 2]], dt: f64) -> Vec<[f64; 2]> {
    let n = pts.len();
    (0..n)
        .map(|i| {
            let (a, b, h) = if i == 0 {
                (pts[0], pts[1], dt)
            } else if i == n - 1 {
                (pts[n - 2], pts[n - 1], dt)
            } else {
                (pts[i - 1], pts[i + 1], 2.0 * dt)
            };
            let v = sub(b, a);
            [v[0] / h, v[1] / h]
        })
        .collect()
}

/// Accelerations at every point of the full sequence. The sequence is
/// extended by one virtual point on each side, continuing the straight line
/// from start to goal at uniform spacing, so a uniformly spaced straight
/// path has zero acceleration everywhere.
fn accelerations(pts: &[[f64; 2]], dt: f64) -> Vec<[f64; 2]> {
    let n = pts.len();
    let step = sub(pts[n - 1], pts[0]).map(|v| v / (n - 1) as f64);
    let before = sub(pts[0], step);
    let after = [pts[n - 1][0] + step[0], pts[n - 1][1] + step[1]];
    let at = |i: isize| -> [f64; 2] {
        if i < 0 {
            before
        } else if i as usize >= n {
            after
        } else {
            pts[i as usize]
        }
    };
    let inv = 1.0 / (dt * dt);
    (0..n as isize)
        .map(|i| {
            let (a, b, c) = (at(i - 1), at(i), at(i + 1));
            [(a[0] - 2.0 * b[0] + c[0]) * inv, (a[1] - 2.0 * b[1] + c[1]) * inv]
        })
        .collect()
}

/// `c_obs = ½ Σ_t c(d(q_t)) ‖q̇_t‖` over all points including endpoints, and
/// `c_smooth = Σ_t ‖q̈_t‖²`.
pub fn trajectory_cost(world: &World2D, traj: &Trajectory, cfg: &CostConfig) -> CostBreakdown {
    let pts = traj.points();
    let vel = velocities(&pts, traj.dt);
    let obstacle = 0.5
        * pts
            .iter()
            .zip(&vel)
            .map(|(p, v)| {
                let c = local_collision_cost(world.nearest(*p).0, world.margin);
                if c == 0.0 {
                    0.0
                } else {
                    c * norm(*v)
                }
            })
            .sum::<f64>();
    let smoothness = accelerations(&pts, traj.dt).iter().map(|a| a[0] * a[0] + a[1] * a[1]).sum::<f64>();
    CostBreakdown { obstacle, smoothness, total: obstacle + cfg.smooth_weight * smoothness }
}

/// Gradient of [`trajectory_cost`]'s total with respect to the interior
/// waypoints, `T x 2`.
pub fn cost_gradient(world: &World2D, traj: &Trajectory, cfg: &CostConfig) -> DMatrix<f64> {
    let pts = traj.points();
    let n = pts.len();
    let dt = traj.dt;
    let vel = velocities(&pts, dt);
    let mut grad = vec![[0.0f64; 2]; n];
    let mut add = |i: usize, g: [f64; 2], s: f64| {
        grad[i][0] += s * g[0];
        grad[i][1] += s * g[1];
    };

    for i in 0..n {
        let (d, nearest) = world.nearest(pts[i]);
        let c = local_collision_cost(d, world.margin);
        if c == 0.0 {
            continue;
        }
        let speed = norm(vel[i]);
        // d c(d(p)) / dp scaled by the speed
        if let Some(k) = nearest {
            let o = &world.obstacles[k];
            let r = sub(pts[i], o.center);
            let len = norm(r);
            if len > 0.0 {
                let slope = local_collision_slope(d, world.margin);
                add(i, r, 0.5 * slope * speed / len);
            }
        }
        // d ‖v_i‖ / dp through the finite-difference stencil
        if speed > 0.0 {
            let unit = [vel[i][0] / speed, vel[i][1] / speed];
            let s = 0.5 * c;
            if i == 0 {
                add(1, unit, s / dt);
            } else if i == n - 1 {
                add(n - 2, unit, -s / dt);
            } else {
                add(i + 1, unit, s / (2.0 * dt));
                add(i - 1, unit, -s / (2.0 * dt));
            }
        }
    }

    if cfg.smooth_weight != 0.0 {
        let acc = accelerations(&pts, dt);
        let s = 2.0 * cfg.smooth_weight / (dt * dt);
        for t in 1..n - 1 {
            for d in 0..DOF {
                grad[t][d] += s * (acc[t - 1][d] - 2.0 * acc[t][d] + acc[t + 1][d]);
            }
        }
    }

    DMatrix::from_fn(n - 2, DOF, |t, d| grad[t + 1][d])
}

/// Checks every waypoint and ten evenly spaced points inside each segment.
pub fn collision_free(world: &World2D, traj: &Trajectory) -> bool {
    let pts = traj.points();
    if pts.iter().any(|p| world.nearest(*p).0 <= 0.0) {
        return false;
    }
    pts.windows(2).all(|w| {
        (1..=10).all(|k| {
            let s = k as f64 / 11.0;
            let p = [w[0][0] + s * (w[1][0] - w[0][0]), w[0][1] + s * (w[1][1] - w[0][1])];
            world.nearest(p).0 > 0.0
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planning::world::Obstacle;

    fn world(obstacles: Vec<Obstacle>) -> World2D {
        World2D::new(obstacles, 0.2, [[-2.0, 2.0], [-2.0, 2.0]], [-1.0, 0.0], [1.0, 0.0]).unwrap()
    }

    #[test]
    fn local_cost_branches() {
        assert_eq!(local_collision_cost(0.2, 0.2), 0.0);
        assert_eq!(local_collision_cost(0.5, 0.2), 0.0);
        assert!((local_collision_cost(0.0, 0.2) - 0.1).abs() < 1e-15);
        assert!((local_collision_cost(-0.3, 0.2) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn local_cost_is_continuous_at_branch_points() {
        let eps = 0.2;
        let h = 1e-8;
        assert!((local_collision_cost(eps - h, eps) - local_collision_cost(eps + h, eps)).abs() < 1e-6);
        assert!((local_collision_cost(-h, eps) - local_collision_cost(h, eps)).abs() < 1e-6);
        assert!((local_collision_cost(h, eps) - eps / 2.0).abs() < 1e-6);
    }

    #[test]
    fn straight_line_far_from_obstacles_is_free() {
        let w = world(vec![Obstacle { center: [0.0, 1.5], radius: 0.2 }]);
        let t = Trajectory::straight_line([-1.0, 0.0], [1.0, 0.0], 20).unwrap();
        let c = trajectory_cost(&w, &t, &CostConfig::default());
        assert_eq!(c.obstacle, 0.0);
        assert!(c.smoothness < 1e-24);
        assert!(cost_gradient(&w, &t, &CostConfig::default()).abs().max() < 1e-12);
        assert!(collision_free(&w, &t));
    }

    #[test]
    fn constant_trajectory_has_zero_smoothness() {
        let t = Trajectory::new([0.3, 0.3], [0.3, 0.3], DMatrix::from_element(6, 2, 0.3), 1.0).unwrap();
        assert_eq!(trajectory_cost(&world(vec![]), &t, &CostConfig::default()).smoothness, 0.0);
    }

    #[test]
    fn single_waypoint_inside_obstacle() {
        // Three interior points; only the middle one lies inside the disc.
        let w = world(vec![Obstacle { center: [0.0, 0.0], radius: 0.3 }]);
        let interior = DMatrix::from_row_slice(3, 2, &[-0.8, 0.0, 0.1, 0.0, 0.8, 0.5]);
        let t = Trajectory::new([-1.5, 0.0], [1.5, 0.0], interior, 1.0).unwrap();
        let c = trajectory_cost(&w, &t, &CostConfig::default());
        // d = 0.1 - 0.3 = -0.2, c = 0.2 + 0.1 = 0.3;
        // v = ((0.8, 0.5) - (-0.8, 0.0)) / 2 = (0.8, 0.25)
        let expected = 0.5 * 0.3 * (0.8f64.powi(2) + 0.25f64.powi(2)).sqrt();
        assert!((c.obstacle - expected).abs() < 1e-14, "{} vs {expected}", c.obstacle);
    }

    #[test]
    fn collision_checks() {
        let empty = world(vec![]);
        let t = Trajectory::straight_line([-1.0, 0.0], [1.0, 0.0], 5).unwrap();
        assert!(collision_free(&empty, &t));

        let w = world(vec![Obstacle { center: [0.0, 0.0], radius: 0.1 }]);
        let through =
            Trajectory::new([-1.0, 0.0], [1.0, 0.0], DMatrix::from_row_slice(1, 2, &[0.0, 0.0]), 1.0).unwrap();
        assert!(!collision_free(&w, &through));

        // Both waypoints outside, the segment between them crosses the disc.
        let interior = DMatrix::from_row_slice(2, 2, &[-0.5, 0.0, 0.5, 0.0]);
        let hop = Trajectory::new([-0.5, 1.0], [0.5, 1.0], interior, 1.0).unwrap();
        assert!(hop.points().iter().all(|p| w.nearest(*p).0 > 0.0));
        assert!(!collision_free(&w, &hop));
    }

    #[test]
    fn waypoint_at_obstacle_centre_has_finite_gradient() {
        let w = world(vec![Obstacle { center: [0.0, 0.0], radius: 0.3 }]);
        let t = Trajectory::straight_line([-1.0, 0.0], [1.0, 0.0], 9).unwrap();
        assert_eq!(t.points()[5], [0.0, 0.0]);
        let g = cost_gradient(&w, &t, &CostConfig::default());
        assert!(g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new([0.0; 2], [1.0; 2], DMatrix::zeros(3, 3), 1.0).is_err());
        assert!(Trajectory::new([0.0; 2], [1.0; 2], DMatrix::zeros(3, 2), 0.0).is_err());
        assert!(Trajectory::from_flat([0.0; 2], [1.0; 2], &[0.0; 5], 1.0).is_err());
        let t = Trajectory::from_flat([0.0; 2], [1.0; 2], &[1.0, 2.0, 3.0, 4.0], 1.0).unwrap();
        assert_eq!(t.points(), vec![[0.0, 0.0], [1.0, 3.0], [2.0, 4.0], [1.0, 1.0]]);
    }
}
