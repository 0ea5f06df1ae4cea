//! Static SVG figures: objective heatmaps, trajectory fans, training curves.

use std::fmt::Write as _;
use std::path::Path;

use solman::objective::Objective;
use solman::planning::World2D;

use crate::error::{CliError, CliResult};

const SIZE: f64 = 480.0;
const PAD: f64 = 40.0;

/// Maps a data rectangle onto the square drawing area, y pointing up.
struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        PAD + (x - self.x.0) / (self.x.1 - self.x.0) * (SIZE - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        SIZE - PAD - (y - self.y.0) / (self.y.1 - self.y.0) * (SIZE - 2.0 * PAD)
    }

    fn scale(&self) -> f64 {
        (SIZE - 2.0 * PAD) / (self.x.1 - self.x.0)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n\
         <title>{title}</title>\n<rect class=\"background\" width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    )
}

/// Dark blue to yellow, `t` in [0, 1].
fn colour(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let r = (68.0 + t * (253.0 - 68.0)).round() as u8;
    let g = (1.0 + t * (231.0 - 1.0)).round() as u8;
    let b = (84.0 + t * (37.0 - 84.0)).round() as u8;
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn polyline(points: impl Iterator<Item = (f64, f64)>) -> String {
    let mut s = String::new();
    for (i, (x, y)) in points.enumerate() {
        if i > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{x:.2},{y:.2}");
    }
    s
}

/// `cells × cells` coloured squares of a 2-D objective over its box, with the
/// decoded manifold points drawn as red circles.
pub fn heatmap_svg(objective: &dyn Objective, cells: usize, points: &[[f64; 2]]) -> CliResult<String> {
    let bounds = objective.bounds();
    if bounds.len() != 2 || cells == 0 {
        return Err(CliError::Config("heatmap needs a 2-D objective and at least one cell".into()));
    }
    let f = Frame { x: bounds[0], y: bounds[1] };
    let (wx, wy) = ((f.x.1 - f.x.0) / cells as f64, (f.y.1 - f.y.0) / cells as f64);
    let mut values = Vec::with_capacity(cells * cells);
    for j in 0..cells {
        for i in 0..cells {
            let x = [f.x.0 + (i as f64 + 0.5) * wx, f.y.0 + (j as f64 + 0.5) * wy];
            values.push(objective.eval(&x));
        }
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut svg = header("objective heatmap");
    let side = wx * f.scale();
    for j in 0..cells {
        for i in 0..cells {
            let v = values[j * cells + i];
            let _ = writeln!(
                svg,
                "<rect class=\"cell\" x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"{}\"/>",
                f.px(f.x.0 + i as f64 * wx),
                f.py(f.y.0 + (j + 1) as f64 * wy),
                side + 0.05,
                wy * f.scale() + 0.05,
                colour((v - lo) / span)
            );
        }
    }
    for p in points {
        let _ = writeln!(
            svg,
            "<circle class=\"manifold\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"none\" stroke=\"red\"/>",
            f.px(p[0]),
            f.py(p[1])
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Obstacles, start, goal, and one polyline per trajectory coloured by its
/// latent value.
pub fn fan_svg(world: &World2D, trajectories: &[(f64, Vec<[f64; 2]>)]) -> String {
    let f = Frame { x: (world.bounds[0][0], world.bounds[0][1]), y: (world.bounds[1][0], world.bounds[1][1]) };
    let mut svg = header("trajectory fan");
    for o in &world.obstacles {
        let (cx, cy, s) = (f.px(o.center[0]), f.py(o.center[1]), f.scale());
        let _ = writeln!(
            svg,
            "<circle class=\"margin\" cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"#eeeeee\"/>",
            (o.radius + world.margin) * s
        );
        let _ = writeln!(
            svg,
            "<circle class=\"obstacle\" cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"{:.2}\" fill=\"#555555\"/>",
            o.radius * s
        );
    }
    let zs: Vec<f64> = trajectories.iter().map(|t| t.0).collect();
    let lo = zs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = zs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for (z, pts) in trajectories {
        let t = if hi > lo { (z - lo) / (hi - lo) } else { 0.5 };
        let _ = writeln!(
            svg,
            "<polyline class=\"trajectory\" data-z=\"{z}\" points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>",
            polyline(pts.iter().map(|p| (f.px(p[0]), f.py(p[1])))),
            colour(t)
        );
    }
    for (class, p) in [("start", world.start), ("goal", world.goal)] {
        let _ = writeln!(
            svg,
            "<circle class=\"{class}\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"5\" fill=\"black\"/>",
            f.px(p[0]),
            f.py(p[1])
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Loss, KL (summed over channels) and capacity against epoch, each series
/// scaled to its own range.
pub fn curves_svg(loss: &[f64], kl: &[f64], capacity: &[f64]) -> CliResult<String> {
    let n = loss.len();
    if n == 0 || kl.len() != n || capacity.len() != n {
        return Err(CliError::Config("curves need equally long, non-empty series".into()));
    }
    let f = Frame { x: (0.0, (n.max(2) - 1) as f64), y: (0.0, 1.0) };
    let mut svg = header("training curves");
    for (class, series, stroke) in [("loss", loss, "#1f77b4"), ("kl", kl, "#d62728"), ("capacity", capacity, "#7f7f7f")]
    {
        let lo = series.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let pts = series.iter().enumerate().map(|(i, v)| (f.px(i as f64), f.py((v - lo) / span)));
        let _ = writeln!(
            svg,
            "<polyline class=\"{class}\" data-min=\"{lo}\" data-max=\"{hi}\" points=\"{}\" fill=\"none\" stroke=\"{stroke}\"/>",
            polyline(pts)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn write_svg(path: &Path, svg: &str) -> CliResult<()> {
    std::fs::write(path, svg).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use solman::objective::ToyFunction;

    fn count(svg: &str, class: &str) -> usize {
        svg.matches(&format!("class=\"{class}\"")).count()
    }

    #[test]
    fn heatmap_has_every_cell_and_point() {
        let svg = heatmap_svg(&ToyFunction::Ring, 40, &[[1.0, 1.0], [0.5, 1.5]]).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(count(&svg, "cell"), 1600);
        assert_eq!(count(&svg, "manifold"), 2);
    }

    #[test]
    fn fan_draws_one_polyline_per_trajectory() {
        let world = World2D::benchmark(2).unwrap();
        let trajs: Vec<(f64, Vec<[f64; 2]>)> =
            (0..7).map(|i| (i as f64, vec![world.start, [0.0, i as f64 * 0.1], world.goal])).collect();
        let svg = fan_svg(&world, &trajs);
        assert_eq!(count(&svg, "trajectory"), 7);
        assert_eq!(count(&svg, "obstacle"), world.obstacles.len());
    }

    #[test]
    fn curves_have_one_vertex_per_epoch() {
        let loss: Vec<f64> = (0..25).map(|e| 1.0 / (e as f64 + 1.0)).collect();
        let svg = curves_svg(&loss, &loss, &loss).unwrap();
        let line = svg.lines().find(|l| l.contains("class=\"loss\"")).unwrap();
        let pts = line.split("points=\"").nth(1).unwrap().split('"').next().unwrap();
        assert_eq!(pts.split(' ').count(), 25);
        assert!(curves_svg(&[], &[], &[]).is_err());
    }
}
