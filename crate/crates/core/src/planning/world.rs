use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const WORLD_SCHEMA_VERSION: u32 = 1;

const BENCHMARKS: [&str; 3] = [
    include_str!("../../worlds/task1.toml"),
    include_str!("../../worlds/task2.toml"),
    include_str!("../../worlds/task3.toml"),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Disc obstacles in a rectangular workspace, with start and goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct World2D {
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    /// Clearance `ε` below which the collision cost becomes positive.
    pub margin: f64,
    /// `[[x_lo, x_hi], [y_lo, y_hi]]`.
    pub bounds: [[f64; 2]; 2],
    pub start: [f64; 2],
    pub goal: [f64; 2],
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
}

impl World2D {
    pub fn new(
        obstacles: Vec<Obstacle>,
        margin: f64,
        bounds: [[f64; 2]; 2],
        start: [f64; 2],
        goal: [f64; 2],
    ) -> Result<Self> {
        let w =
            Self { schema_version: WORLD_SCHEMA_VERSION, name: String::new(), margin, bounds, start, goal, obstacles };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != WORLD_SCHEMA_VERSION {
            return Err(Error::World(format!(
                "unsupported schema_version {} (expected {WORLD_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::World(format!("margin must be positive, got {}", self.margin)));
        }
        for (d, [lo, hi]) in self.bounds.iter().enumerate() {
            if !(lo < hi) {
                return Err(Error::World(format!("bounds[{d}] = [{lo}, {hi}] is not increasing")));
            }
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.radius > 0.0 && o.radius.is_finite()) {
                return Err(Error::World(format!("obstacles[{i}].radius must be positive, got {}", o.radius)));
            }
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let w: World2D = toml::from_str(text).map_err(|e| Error::World(e.to_string()))?;
        w.validate()?;
        Ok(w)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::World(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::World(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::World(e.to_string()))
    }

    /// One of the shipped benchmark layouts, `task` in 1..=3.
    pub fn benchmark(task: u32) -> Result<Self> {
        let text = BENCHMARKS
            .get((task as usize).wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("benchmark task must be 1..=3, got {task}")))?;
        Self::from_toml_str(text)
    }

    /// Signed distance to the closest obstacle surface and the index of that
    /// obstacle; `+inf` and `None` when there are no obstacles.
    pub fn nearest(&self, p: [f64; 2]) -> (f64, Option<usize>) {
        let mut best = (f64::INFINITY, None);
        for (i, o) in self.obstacles.iter().enumerate() {
            let d = (p[0] - o.center[0]).hypot(p[1] - o.center[1]) - o.radius;
            if d < best.0 {
                best = (d, Some(i));
            }
        }
        best
    }
}

/// Minimum over obstacles of `‖p − c‖ − r`.
pub fn signed_distance(world: &World2D, p: [f64; 2]) -> f64 {
    world.nearest(p).0
}
