//! One function per mode. Every mode loops over the configured seeds and
//! writes its tables once, at the end.

use std::path::Path;

use rayon::prelude::*;
use solman::cem::{cem_optimize, CemConfig};
use solman::lsmo::{evaluate_at, linear_z_grid, mean_std, train, ManifoldModel, TrainConfig};
use solman::objective::{Objective, ToyFunction};
use solman::planning::{
    collision_free, decode_trajectories, fine_tune, plan_with_manifold, straight_line_interior, trajectory_cost, Chomp,
    CostConfig, PriorConfig, Trajectory, World2D, DOF,
};
use solman::proposal::{BoxUniform, Proposal, TrajectoryPrior};

use crate::checkpoint::{load_model, save_checkpoint, ModelCheckpoint, Task};
use crate::config::{ExperimentConfig, Mode, PlotKind, ZGrid};
use crate::error::{CliError, CliResult};
use crate::output::{curves_table, ensure_dir, num, read_curves, Table};
use crate::plot::{curves_svg, fan_svg, heatmap_svg, write_svg};

const HEATMAP_CELLS: usize = 100;

pub fn run_mode(cfg: &ExperimentConfig) -> CliResult<()> {
    ensure_dir(&cfg.out)?;
    match cfg.mode()? {
        Mode::ToyTrain => toy_train(cfg),
        Mode::ToyEval => toy_eval(cfg),
        Mode::Cem => cem(cfg),
        Mode::PlanTrain => plan_train(cfg),
        Mode::PlanSample => plan_sample(cfg),
        Mode::PlanFinetune => plan_finetune(cfg),
        Mode::Plot => plot(cfg),
    }
}

fn z_matrix(grid: ZGrid, latent_dim: usize) -> CliResult<nalgebra::DMatrix<f64>> {
    Ok(linear_z_grid(grid.lo, grid.hi, grid.count, latent_dim)?)
}

fn z_header(latent_dim: usize) -> Vec<String> {
    (0..latent_dim).map(|c| format!("z_{c}")).collect()
}

fn seeds_comment(seeds: &[u64]) -> String {
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("seeds: {}", list.join(" "))
}

/// Per-point manifold scores, pooled across seeds for the summary.
struct ToyMetrics {
    rows: Table,
    pooled: Vec<f64>,
    per_seed: usize,
}

impl ToyMetrics {
    fn new(latent_dim: usize, dim: usize) -> Self {
        let mut header = vec!["seed".to_string(), "z_index".into()];
        header.extend(z_header(latent_dim));
        header.extend((0..dim).map(|d| format!("x_{}", d + 1)));
        header.push("score".into());
        Self { rows: Table::new(&header), pooled: Vec::new(), per_seed: 0 }
    }

    fn add(&mut self, seed: u64, model: &ManifoldModel, f: &dyn Objective, grid: ZGrid) -> CliResult<Vec<[f64; 2]>> {
        let z = z_matrix(grid, model.latent_dim())?;
        let scores = evaluate_at(model, f, &z)?;
        let x = model.decode(&z);
        let mut points = Vec::with_capacity(z.ncols());
        for j in 0..z.ncols() {
            let mut row = vec![seed.to_string(), j.to_string()];
            row.extend(z.column(j).iter().map(|v| num(*v)));
            row.extend(x.column(j).iter().map(|v| num(*v)));
            row.push(num(scores.scores[j]));
            self.rows.row(row);
            if x.nrows() == 2 {
                points.push([x[(0, j)], x[(1, j)]]);
            }
        }
        self.pooled.extend(&scores.scores);
        self.per_seed = z.ncols();
        log::info!("seed {seed}: mean score {:.6} (std {:.6})", scores.mean, scores.std);
        Ok(points)
    }

    fn write(&self, out: &Path, seeds: &[u64]) -> CliResult<()> {
        self.rows.write(&out.join("metrics.csv"))?;
        let (mean, std) = mean_std(&self.pooled);
        let mut summary = Table::new(&["mean", "std"]);
        summary.comment(format!(
            "pooled over {} seeds x {} z points; std is the population std of all pooled scores",
            seeds.len(),
            self.per_seed
        ));
        summary.comment(seeds_comment(seeds));
        summary.row(vec![num(mean), num(std)]);
        summary.write(&out.join("summary.csv"))
    }
}

fn timing_table() -> Table {
    Table::new(&["seed", "train_wall_secs"])
}

fn save_training(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &ManifoldModel,
    task: Task,
    tc: &TrainConfig,
    report: &solman::lsmo::TrainReport,
) -> CliResult<()> {
    save_checkpoint(&cfg.out.join(format!("model_seed{seed}.json")), &ModelCheckpoint::from_model(model, task, tc))?;
    curves_table(report).write(&cfg.out.join(format!("curves_seed{seed}.csv")))?;
    let kl: Vec<f64> = report.kl.iter().map(|k| k.iter().sum()).collect();
    write_svg(&cfg.out.join(format!("curves_seed{seed}.svg")), &curves_svg(&report.loss, &kl, &report.capacity)?)
}

fn toy_train(cfg: &ExperimentConfig) -> CliResult<()> {
    let f = cfg.toy_function()?;
    let base = cfg.train_config()?;
    let grid = cfg.z_grid()?;
    let proposal = BoxUniform::new(f.bounds())?;
    let mut metrics = ToyMetrics::new(base.latent_dim, f.dim());
    let mut timing = timing_table();
    for &seed in &cfg.seeds {
        let tc = TrainConfig { seed, ..base.clone() };
        let (model, report) = train(&f, &proposal, &tc)?;
        save_training(cfg, seed, &model, Task::Toy { function: f.id() }, &tc, &report)?;
        let points = metrics.add(seed, &model, &f, grid)?;
        write_svg(&cfg.out.join(format!("heatmap_seed{seed}.svg")), &heatmap_svg(&f, HEATMAP_CELLS, &points)?)?;
        timing.row(vec![seed.to_string(), num(report.wall_time_secs)]);
    }
    metrics.write(&cfg.out, &cfg.seeds)?;
    timing.write(&cfg.out.join("timing.csv"))
}

fn load_toy(cfg: &ExperimentConfig, seed: u64) -> CliResult<(ManifoldModel, ToyFunction)> {
    let path = cfg.checkpoint_path(seed)?;
    let (model, ckpt) = load_model(&path)?;
    match ckpt.task {
        Task::Toy { function } => Ok((model, ToyFunction::from_id(function)?)),
        Task::Planning { .. } => Err(CliError::Config(format!("{}: not a toy-function checkpoint", path.display()))),
    }
}

fn toy_eval(cfg: &ExperimentConfig) -> CliResult<()> {
    let grid = cfg.z_grid()?;
    let mut metrics: Option<ToyMetrics> = None;
    for &seed in &cfg.seeds {
        let (model, f) = load_toy(cfg, seed)?;
        let m = metrics.get_or_insert_with(|| ToyMetrics::new(model.latent_dim(), f.dim()));
        m.add(seed, &model, &f, grid)?;
    }
    metrics.expect("seed list is non-empty").write(&cfg.out, &cfg.seeds)
}

fn cem(cfg: &ExperimentConfig) -> CliResult<()> {
    let f = cfg.toy_function()?;
    let mut components = Table::new(&["seed", "component", "weight", "x_1", "x_2", "score", "best"]);
    let mut history = Table::new(&["seed", "iteration", "elite_threshold", "best_score", "mean_elite_score"]);
    let (mut best, mut all) = (Vec::new(), Vec::new());
    for &seed in &cfg.seeds {
        let r = cem_optimize(&f, &CemConfig { seed, ..cfg.cem.clone() })?;
        let (b, score) = r.best_component();
        for (k, (mean, s)) in r.mixture.means.iter().zip(&r.scores).enumerate() {
            components.row(vec![
                seed.to_string(),
                k.to_string(),
                num(r.mixture.weights[k]),
                num(mean[0]),
                num(mean[1]),
                num(*s),
                (k == b).to_string(),
            ]);
        }
        for (i, h) in r.history.iter().enumerate() {
            history.row(vec![
                seed.to_string(),
                i.to_string(),
                num(h.elite_threshold),
                num(h.best_score),
                num(h.mean_elite_score),
            ]);
        }
        log::info!("seed {seed}: best component score {score:.6}");
        best.push(score);
        all.extend(&r.scores);
    }
    components.write(&cfg.out.join("cem_components.csv"))?;
    history.write(&cfg.out.join("cem_history.csv"))?;
    let mut summary = Table::new(&["statistic", "mean", "std"]);
    summary.comment("best_component pools the best component score of each seed; all_components pools every component");
    summary.comment("std is the population std of the pooled values");
    summary.comment(seeds_comment(&cfg.seeds));
    for (name, v) in [("best_component", &best), ("all_components", &all)] {
        let (m, s) = mean_std(v);
        summary.row(vec![name.to_string(), num(m), num(s)]);
    }
    summary.write(&cfg.out.join("summary.csv"))
}

/// Everything needed to turn a planning model into trajectories.
struct PlanningTask {
    world: World2D,
    prior: PriorConfig,
    cost: CostConfig,
}

impl PlanningTask {
    fn from_checkpoint(path: &Path, task: Task) -> CliResult<Self> {
        match task {
            Task::Planning { world, prior, cost } => Ok(Self { world, prior, cost }),
            Task::Toy { .. } => Err(CliError::Config(format!("{}: not a planning checkpoint", path.display()))),
        }
    }

    fn prior(&self) -> CliResult<TrajectoryPrior> {
        let mean = straight_line_interior(self.world.start, self.world.goal, self.prior.steps)?;
        Ok(TrajectoryPrior::new(self.prior.steps, DOF, self.prior.scale, mean)?)
    }
}

fn load_planning(cfg: &ExperimentConfig, seed: u64) -> CliResult<(ManifoldModel, PlanningTask)> {
    let path = cfg.checkpoint_path(seed)?;
    let (model, ckpt) = load_model(&path)?;
    Ok((model, PlanningTask::from_checkpoint(&path, ckpt.task)?))
}

fn write_trajectory(path: &Path, traj: &Trajectory, comment: String) -> CliResult<()> {
    let mut t = Table::new(&["index", "x", "y"]);
    t.comment(comment);
    for (i, p) in traj.points().iter().enumerate() {
        t.row(vec![i.to_string(), num(p[0]), num(p[1])]);
    }
    t.write(path)
}

fn trajectories_table(latent_dim: usize) -> Table {
    let mut header = vec!["seed".to_string(), "z_index".into()];
    header.extend(z_header(latent_dim));
    header.extend(["collision_free", "obstacle_cost", "smoothness_cost", "total_cost", "file"].map(String::from));
    Table::new(&header)
}

/// Decodes the z grid, writes one file per trajectory, and returns them.
fn sample_trajectories(
    cfg: &ExperimentConfig,
    seed: u64,
    model: &ManifoldModel,
    task: &PlanningTask,
    grid: ZGrid,
    table: &mut Table,
) -> CliResult<Vec<(f64, Trajectory)>> {
    let z = z_matrix(grid, model.latent_dim())?;
    let trajs = decode_trajectories(model, task.world.start, task.world.goal, task.prior.dt, &z)?;
    let mut fan = Vec::with_capacity(trajs.len());
    for (j, traj) in trajs.into_iter().enumerate() {
        let free = collision_free(&task.world, &traj);
        let c = trajectory_cost(&task.world, &traj, &task.cost);
        let name = format!("traj_seed{seed}_z{j}.csv");
        let zs: Vec<String> = z.column(j).iter().map(|v| num(*v)).collect();
        write_trajectory(
            &cfg.out.join(&name),
            &traj,
            format!("seed {seed}, z = [{}], collision_free = {free}", zs.join(" ")),
        )?;
        let mut row = vec![seed.to_string(), j.to_string()];
        row.extend(zs);
        row.extend([free.to_string(), num(c.obstacle), num(c.smoothness), num(c.total), name]);
        table.row(row);
        fan.push((z[(0, j)], traj));
    }
    Ok(fan)
}

fn write_fan(path: &Path, world: &World2D, trajs: &[(f64, Trajectory)]) -> CliResult<()> {
    let lines: Vec<(f64, Vec<[f64; 2]>)> = trajs.iter().map(|(z, t)| (*z, t.points())).collect();
    write_svg(path, &fan_svg(world, &lines))
}

fn plan_train(cfg: &ExperimentConfig) -> CliResult<()> {
    let world = cfg.world()?;
    let base = cfg.train_config()?;
    let grid = cfg.z_grid()?;
    let mut table = trajectories_table(base.latent_dim);
    let mut timing = timing_table();
    for &seed in &cfg.seeds {
        let tc = TrainConfig { seed, ..base.clone() };
        let r = plan_with_manifold(&world, world.start, world.goal, &tc, &cfg.prior, &cfg.cost)?;
        let task = PlanningTask { world: world.clone(), prior: cfg.prior, cost: cfg.cost };
        let stored = Task::Planning { world: world.clone(), prior: cfg.prior, cost: cfg.cost };
        save_training(cfg, seed, &r.model, stored, &tc, &r.report)?;
        let fan = sample_trajectories(cfg, seed, &r.model, &task, grid, &mut table)?;
        write_fan(&cfg.out.join(format!("fan_seed{seed}.svg")), &world, &fan)?;
        timing.row(vec![seed.to_string(), num(r.report.wall_time_secs)]);
    }
    table.write(&cfg.out.join("trajectories.csv"))?;
    timing.write(&cfg.out.join("timing.csv"))
}

fn plan_sample(cfg: &ExperimentConfig) -> CliResult<()> {
    let grid = cfg.z_grid()?;
    let mut table: Option<Table> = None;
    for &seed in &cfg.seeds {
        let (model, task) = load_planning(cfg, seed)?;
        let t = table.get_or_insert_with(|| trajectories_table(model.latent_dim()));
        let fan = sample_trajectories(cfg, seed, &model, &task, grid, t)?;
        write_fan(&cfg.out.join(format!("fan_seed{seed}.svg")), &task.world, &fan)?;
    }
    table.expect("seed list is non-empty").write(&cfg.out.join("trajectories.csv"))
}

/// Middle value; the mean of the two middle values for even counts.
pub fn median(values: &[usize]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2] as f64,
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]) as f64,
    }
}

struct FineTuneRun {
    source: &'static str,
    index: usize,
    z: Option<Vec<f64>>,
    start_free: bool,
    start_cost: f64,
    result: solman::planning::FineTuneResult,
}

fn plan_finetune(cfg: &ExperimentConfig) -> CliResult<()> {
    let grid = cfg.z_grid()?;
    let mut table: Option<Table> = None;
    let mut iterations = [Vec::new(), Vec::new()];
    let mut free = [(0usize, 0usize), (0usize, 0usize)];
    for &seed in &cfg.seeds {
        let (model, task) = load_planning(cfg, seed)?;
        let latent = model.latent_dim();
        let chomp = Chomp::new(task.prior.steps, cfg.chomp)?;
        let z = z_matrix(grid, latent)?;
        let decoded = decode_trajectories(&model, task.world.start, task.world.goal, task.prior.dt, &z)?;
        let random = task.prior()?.sample(cfg.random_starts, seed);
        let mut starts: Vec<(&'static str, usize, Option<Vec<f64>>, Trajectory)> = decoded
            .into_iter()
            .enumerate()
            .map(|(j, t)| ("decoded", j, Some(z.column(j).iter().copied().collect()), t))
            .collect();
        for (j, c) in random.column_iter().enumerate() {
            let t = Trajectory::from_flat(task.world.start, task.world.goal, c.as_slice(), task.prior.dt)?;
            starts.push(("prior", j, None, t));
        }
        let runs = starts
            .into_par_iter()
            .map(|(source, index, z, t)| {
                let result = fine_tune(&task.world, &t, &task.cost, &chomp)?;
                Ok(FineTuneRun {
                    source,
                    index,
                    z,
                    start_free: collision_free(&task.world, &t),
                    start_cost: trajectory_cost(&task.world, &t, &task.cost).total,
                    result,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;

        let t = table.get_or_insert_with(|| {
            let mut header = vec!["seed".to_string(), "source".into(), "index".into()];
            header.extend(z_header(latent));
            header.extend(
                [
                    "start_collision_free",
                    "start_cost",
                    "iterations",
                    "converged",
                    "final_cost",
                    "collision_free",
                    "file",
                ]
                .map(String::from),
            );
            Table::new(&header)
        });
        let mut fan = Vec::new();
        for run in &runs {
            let name = format!("ft_seed{seed}_{}{}.csv", run.source, run.index);
            let end_free = collision_free(&task.world, &run.result.trajectory);
            write_trajectory(
                &cfg.out.join(&name),
                &run.result.trajectory,
                format!("seed {seed}, fine-tuned from {} start {}, collision_free = {end_free}", run.source, run.index),
            )?;
            let mut row = vec![seed.to_string(), run.source.to_string(), run.index.to_string()];
            match &run.z {
                Some(z) => row.extend(z.iter().map(|v| num(*v))),
                None => row.extend(std::iter::repeat_n(String::new(), latent)),
            }
            row.extend([
                run.start_free.to_string(),
                num(run.start_cost),
                run.result.iterations.to_string(),
                run.result.converged.to_string(),
                num(run.result.final_cost),
                end_free.to_string(),
                name,
            ]);
            t.row(row);
            let k = usize::from(run.source == "prior");
            iterations[k].push(run.result.iterations);
            free[k].0 += usize::from(run.start_free);
            free[k].1 += usize::from(end_free);
            if let Some(z) = &run.z {
                fan.push((z[0], run.result.trajectory.clone()));
            }
        }
        write_fan(&cfg.out.join(format!("fan_finetuned_seed{seed}.svg")), &task.world, &fan)?;
    }
    table.expect("seed list is non-empty").write(&cfg.out.join("finetune.csv"))?;
    let mut summary =
        Table::new(&["source", "starts", "median_iterations", "collision_free_before", "collision_free_after"]);
    summary.comment("pooled over all seeds; collision_free_* count trajectories");
    summary.comment(seeds_comment(&cfg.seeds));
    for (k, source) in ["decoded", "prior"].into_iter().enumerate() {
        summary.row(vec![
            source.to_string(),
            iterations[k].len().to_string(),
            num(median(&iterations[k])),
            free[k].0.to_string(),
            free[k].1.to_string(),
        ]);
    }
    summary.write(&cfg.out.join("summary.csv"))
}

fn plot(cfg: &ExperimentConfig) -> CliResult<()> {
    let kind = cfg.plot_kind()?;
    for &seed in &cfg.seeds {
        match kind {
            PlotKind::Heatmap => {
                let (model, f) = load_toy(cfg, seed)?;
                let z = z_matrix(cfg.z_grid.unwrap_or(ZGrid::TOY), model.latent_dim())?;
                let x = model.decode(&z);
                let points: Vec<[f64; 2]> = x.column_iter().map(|c| [c[0], c[1]]).collect();
                write_svg(&cfg.out.join(format!("heatmap_seed{seed}.svg")), &heatmap_svg(&f, HEATMAP_CELLS, &points)?)?;
            }
            PlotKind::Fan => {
                let (model, task) = load_planning(cfg, seed)?;
                let z = z_matrix(cfg.z_grid.unwrap_or(ZGrid::PLANNING), model.latent_dim())?;
                let trajs = decode_trajectories(&model, task.world.start, task.world.goal, task.prior.dt, &z)?;
                let fan: Vec<(f64, Trajectory)> = trajs.into_iter().enumerate().map(|(j, t)| (z[(0, j)], t)).collect();
                write_fan(&cfg.out.join(format!("fan_seed{seed}.svg")), &task.world, &fan)?;
            }
            PlotKind::Curves => {
                let (loss, kl, cap) = read_curves(&cfg.curves_path(seed))?;
                write_svg(&cfg.out.join(format!("curves_seed{seed}.svg")), &curves_svg(&loss, &kl, &cap)?)?;
            }
        }
    }
    Ok(())
}
