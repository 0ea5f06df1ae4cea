//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.
//!
//! Run everything with `cargo test --release -p solman-cli --test acceptance`,
//! or pick criteria by number: `... --test acceptance -- 3 4 8`.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use solman::cem::{cem_optimize, CemConfig};
use solman::lsmo::{evaluate_manifold, gaussian_kl, linear_z_grid, train, ManifoldModel, TrainConfig};
use solman::objective::{grid_max, shape_scores, Objective, ShapingConfig, ToyFunction};
use solman::planning::{
    chomp_update, collision_free, cost_gradient, decode_trajectories, fine_tune, local_collision_cost,
    plan_with_manifold, trajectory_cost, Chomp, ChompConfig, CostConfig, Obstacle, PlanResult, PriorConfig, Trajectory,
    World2D,
};
use solman::proposal::{compute_weights, Proposal, TrajectoryPrior};
use solman::tinynet::DenseNet;
use solman_cli::checkpoint::{ModelCheckpoint, Task};
use solman_cli::{ExperimentConfig, Mode};

const SEEDS: [u64; 3] = [0, 1, 2];
const GRID_RESOLUTION: usize = 2001;
const TOY_Z_POINTS: usize = 200;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn pooled_toy_mean(f: ToyFunction) -> f64 {
    let mut scores = Vec::new();
    for seed in SEEDS {
        let proposal = solman::proposal::BoxUniform::new(f.bounds()).unwrap();
        let (model, _) = train(&f, &proposal, &TrainConfig { seed, ..TrainConfig::toy() }).unwrap();
        scores.extend(evaluate_manifold(&model, &f, TOY_Z_POINTS).unwrap().scores);
    }
    scores.iter().sum::<f64>() / scores.len() as f64
}

fn criterion_1() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for f in [ToyFunction::from_id(1).unwrap(), ToyFunction::from_id(2).unwrap(), ToyFunction::from_id(4).unwrap()] {
        let started = Instant::now();
        let mean = pooled_toy_mean(f);
        pass &= mean >= 0.95;
        parts.push(format!("f{} {mean:.4} ({:.0} s)", f.id(), started.elapsed().as_secs_f64()));
    }
    outcome(pass, format!("pooled mean >= 0.95 over 3 seeds x 200 z: {}", parts.join(", ")))
}

fn criterion_2() -> Outcome {
    let f = ToyFunction::from_id(3).unwrap();
    let oracle = grid_max(3, GRID_RESOLUTION).unwrap().score;
    let mean = pooled_toy_mean(f);
    outcome(mean >= oracle - 0.08, format!("pooled mean {mean:.4} >= grid max {oracle:.4} - 0.08"))
}

fn criterion_3() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for f in ToyFunction::ALL {
        let started = Instant::now();
        let oracle = grid_max(f.id(), GRID_RESOLUTION).unwrap().score;
        let r = cem_optimize(&f, &CemConfig::default()).unwrap();
        let best = r.best_component().1;
        pass &= best >= oracle - 1e-3;
        parts.push(format!("f{} {best:.6} vs {oracle:.6} ({:.1} s)", f.id(), started.elapsed().as_secs_f64()));
    }
    outcome(pass, format!("best component >= grid max - 1e-3: {}", parts.join(", ")))
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Worst relative error of `backward` against central differences of
/// `Σ u ⊙ net(x)` over random architectures.
fn tinynet_fd_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for draw in 0..32u64 {
        let (sizes, batch, coords): (Vec<usize>, usize, Option<usize>) = if draw < 2 {
            (vec![400, 300, 300, 400], 2, Some(64))
        } else {
            let depth = rng.random_range(2..=5);
            ((0..depth).map(|_| rng.random_range(1..=12)).collect(), 5, None)
        };
        let mut net = DenseNet::init(&sizes, draw).unwrap();
        // non-zero biases keep pre-activations off the ReLU kink
        for l in net.layers_mut() {
            for b in l.bias.iter_mut() {
                *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let x = normal_matrix(sizes[0], batch, &mut rng);
        let u = normal_matrix(*sizes.last().unwrap(), batch, &mut rng);
        let (_, cache) = net.forward(&x).unwrap();
        let analytic = net.backward(&cache, &u).unwrap().0.to_flat();
        let mut p = net.to_flat();
        let picks: Vec<usize> = match coords {
            None => (0..p.len()).collect(),
            Some(n) => (0..n).map(|_| rng.random_range(0..p.len())).collect(),
        };
        let h = 1e-5;
        for i in picks {
            let orig = p[i];
            p[i] = orig + h;
            let up = DenseNet::from_flat(&sizes, &p).unwrap().predict(&x).dot(&u);
            p[i] = orig - h;
            let down = DenseNet::from_flat(&sizes, &p).unwrap().predict(&x).dot(&u);
            p[i] = orig;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h), 1e-6));
        }
    }
    worst
}

/// Worst relative error of `cost_gradient` on 20 random trajectories in a
/// three-obstacle world, skipping draws within reach of a branch boundary.
fn cost_fd_error() -> f64 {
    let world = World2D::new(
        vec![
            Obstacle { center: [-0.4, 0.1], radius: 0.25 },
            Obstacle { center: [0.2, -0.15], radius: 0.2 },
            Obstacle { center: [0.6, 0.25], radius: 0.3 },
        ],
        0.2,
        [[-1.5, 1.5]; 2],
        [-1.0, 0.0],
        [1.0, 0.0],
    )
    .unwrap();
    let cfg = CostConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let h = 1e-6;
    let steps = 15;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    while checked < 20 {
        let base = Trajectory::straight_line(world.start, world.goal, steps).unwrap();
        let traj = base.with_interior(&base.interior + normal_matrix(steps, 2, &mut rng) * 0.15);
        let near = traj.points().iter().any(|p| {
            world.obstacles.iter().any(|o| {
                let r = (p[0] - o.center[0]).hypot(p[1] - o.center[1]);
                let d = r - o.radius;
                r < 10.0 * h || d.abs() < 10.0 * h || (d - world.margin).abs() < 10.0 * h
            })
        });
        if near {
            continue;
        }
        checked += 1;
        let analytic = cost_gradient(&world, &traj, &cfg);
        let scale = analytic.amax().max(1e-12);
        for r in 0..steps {
            for c in 0..2 {
                let mut up = traj.interior.clone();
                up[(r, c)] += h;
                let mut down = traj.interior.clone();
                down[(r, c)] -= h;
                let numeric = (trajectory_cost(&world, &traj.with_interior(up), &cfg).total
                    - trajectory_cost(&world, &traj.with_interior(down), &cfg).total)
                    / (2.0 * h);
                worst = worst.max(rel_err(analytic[(r, c)], numeric, 1e-4 * scale));
            }
        }
    }
    worst
}

fn criterion_4() -> Outcome {
    let net = tinynet_fd_error();
    let cost = cost_fd_error();
    outcome(
        net < 1e-4 && cost < 1e-4,
        format!("max relative error tinynet {net:.2e}, cost_gradient {cost:.2e} (< 1e-4)"),
    )
}

fn criterion_5() -> Outcome {
    let cfg = PriorConfig::default();
    let world = World2D::benchmark(1).unwrap();
    let mean = solman::planning::straight_line_interior(world.start, world.goal, cfg.steps).unwrap();
    let prior = TrajectoryPrior::new(cfg.steps, 2, cfg.scale, mean).unwrap();
    let n = 20_000;
    let x = prior.sample(n, 5);
    let m = x.column_mean();
    let centred = &x - &m * DVector::from_element(n, 1.0).transpose();
    let emp = &centred * centred.transpose() / (n as f64 - 1.0);
    let target = prior.full_covariance();
    let err = (&emp - &target).norm() / target.norm();
    let fixed = x.column_iter().all(|c| {
        let t = Trajectory::from_flat(world.start, world.goal, c.as_slice(), cfg.dt).unwrap();
        let pts = t.points();
        pts[0] == world.start && pts[pts.len() - 1] == world.goal
    });
    outcome(err < 0.10 && fixed, format!("relative Frobenius error {err:.4} (< 0.10), endpoints fixed: {fixed}"))
}

/// Sign of the side of the obstacle the trajectory's closest approach lies on,
/// relative to the start-to-goal direction.
fn side_of(world: &World2D, traj: &Trajectory) -> f64 {
    let c = world.obstacles[0].center;
    let pts = traj.points();
    let p = pts
        .iter()
        .min_by(|a, b| {
            let da = (a[0] - c[0]).hypot(a[1] - c[1]);
            let db = (b[0] - c[0]).hypot(b[1] - c[1]);
            da.total_cmp(&db)
        })
        .unwrap();
    let dir = [world.goal[0] - world.start[0], world.goal[1] - world.start[1]];
    (dir[0] * (p[1] - c[1]) - dir[1] * (p[0] - c[0])).signum()
}

fn train_planning_models() -> Vec<PlanResult> {
    let world = World2D::benchmark(1).unwrap();
    SEEDS
        .iter()
        .map(|&seed| {
            let started = Instant::now();
            let cfg = TrainConfig { seed, ..TrainConfig::planning() };
            let r = plan_with_manifold(
                &world,
                world.start,
                world.goal,
                &cfg,
                &PriorConfig::default(),
                &CostConfig::default(),
            )
            .unwrap();
            eprintln!("planning seed {seed}: trained in {:.0} s", started.elapsed().as_secs_f64());
            r
        })
        .collect()
}

fn criterion_6(models: &[PlanResult], minutes: f64) -> Outcome {
    let world = World2D::benchmark(1).unwrap();
    let cost = CostConfig::default();
    let dt = PriorConfig::default().dt;
    let z = linear_z_grid(-1.28, 1.28, 7, 1).unwrap();
    let chomp = Chomp::new(PriorConfig::default().steps, ChompConfig::default()).unwrap();
    let (mut total, mut free_before, mut free_after, mut spread) = (0, 0, 0, 0);
    for r in models {
        let trajs = decode_trajectories(&r.model, world.start, world.goal, dt, &z).unwrap();
        for t in &trajs {
            total += 1;
            free_before += usize::from(collision_free(&world, t));
            let tuned = fine_tune(&world, t, &cost, &chomp).unwrap();
            free_after += usize::from(collision_free(&world, &tuned.trajectory));
        }
        if side_of(&world, &trajs[0]) != side_of(&world, &trajs[trajs.len() - 1]) {
            spread += 1;
        }
    }
    let a = free_before as f64 >= 0.9 * total as f64;
    let b = free_after == total;
    let c = spread >= 2;
    outcome(
        a && b && c,
        format!(
            "(a) collision-free before fine-tune {free_before}/{total} (>= 90%), (b) after {free_after}/{total}, \
             (c) opposite sides in {spread}/3 seeds (>= 2); training {minutes:.1} min"
        ),
    )
}

fn median(v: &mut [usize]) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2]) as f64
    }
}

fn criterion_7(model: &ManifoldModel, prior: &TrajectoryPrior) -> Outcome {
    let world = World2D::benchmark(1).unwrap();
    let cost = CostConfig::default();
    let dt = PriorConfig::default().dt;
    let chomp = Chomp::new(prior.steps(), ChompConfig::default()).unwrap();
    let z = linear_z_grid(-1.28, 1.28, 10, 1).unwrap();
    let decoded = decode_trajectories(model, world.start, world.goal, dt, &z).unwrap();
    let mut from_decoded: Vec<usize> =
        decoded.iter().map(|t| fine_tune(&world, t, &cost, &chomp).unwrap().iterations).collect();
    let samples = prior.sample(10, 100);
    let mut from_prior: Vec<usize> = samples
        .column_iter()
        .map(|c| {
            let t = Trajectory::from_flat(world.start, world.goal, c.as_slice(), dt).unwrap();
            fine_tune(&world, &t, &cost, &chomp).unwrap().iterations
        })
        .collect();
    let (md, mp) = (median(&mut from_decoded), median(&mut from_prior));
    outcome(
        md < mp,
        format!("median iterations from decoded {md} < from prior samples {mp} ({from_decoded:?} vs {from_prior:?})"),
    )
}

type Check = (&'static str, fn() -> Result<(), String>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn kl_checks() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let mu: f64 = rng.random_range(-5.0..5.0);
        let lv: f64 = rng.random_range(-8.0..8.0);
        ensure(gaussian_kl(&[mu], &[lv])[0] >= 0.0, "negative KL")?;
    }
    ensure(gaussian_kl(&[0.0], &[0.0])[0] == 0.0, "KL(N(0,1)||N(0,1)) != 0")?;
    ensure((gaussian_kl(&[1.0], &[0.0])[0] - 0.5).abs() < 1e-15, "KL at mu=1")?;
    let expected = 0.5 * (2f64.exp() - 1.0 - 2.0);
    ensure((gaussian_kl(&[0.0], &[2.0])[0] - expected).abs() < 1e-12, "KL at logvar=2")
}

fn shaping_checks() -> Result<(), String> {
    let cfg = ShapingConfig::new(10.0).unwrap();
    let s = shape_scores(&[0.0, 0.5, 1.0], &cfg).unwrap().values;
    ensure(
        (s[0] - (-10f64).exp()).abs() < 1e-18 && (s[1] - (-5f64).exp()).abs() < 1e-15 && s[2] == 1.0,
        "spot values",
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let raw: Vec<f64> = (0..200).map(|_| rng.random_range(-3.0..7.0)).collect();
    let shaped = shape_scores(&raw, &cfg).unwrap().values;
    ensure(shaped.iter().all(|v| *v > 0.0 && *v <= 1.0), "range")?;
    for i in 0..raw.len() {
        for j in 0..raw.len() {
            if raw[i] < raw[j] {
                ensure(shaped[i] <= shaped[j], "monotonicity")?;
            }
        }
    }
    // affine invariance: f(a R + b) = f(R) for a > 0
    let moved: Vec<f64> = raw.iter().map(|r| 2.5 * r - 4.0).collect();
    let again = shape_scores(&moved, &cfg).unwrap().values;
    ensure(shaped.iter().zip(&again).all(|(a, b)| (a - b).abs() < 1e-12), "affine invariance")?;
    ensure(shape_scores(&[0.3, 0.3, 0.3], &cfg).unwrap().degenerate, "degenerate batch flag")
}

fn weight_checks() -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shaped: Vec<f64> = (0..100).map(|_| rng.random_range(0.01..1.0)).collect();
    let logp: Vec<f64> = (0..100).map(|_| rng.random_range(-4.0..2.0)).collect();
    let w = compute_weights(&shaped, &logp).unwrap();
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    ensure((mean - 1.0).abs() < 1e-12, format!("mean weight {mean}"))?;
    let scaled: Vec<f64> = shaped.iter().map(|s| 7.0 * s).collect();
    let shifted: Vec<f64> = logp.iter().map(|l| l + 3.3).collect();
    for other in [compute_weights(&scaled, &logp).unwrap(), compute_weights(&shaped, &shifted).unwrap()] {
        ensure(w.iter().zip(&other).all(|(a, b)| (a - b).abs() < 1e-12 * a.max(1.0)), "weight invariance")?;
    }
    Ok(())
}

fn chomp_checks() -> Result<(), String> {
    let steps = 20;
    let chomp = Chomp::new(steps, ChompConfig::default()).map_err(|e| e.to_string())?;
    let line = Trajectory::straight_line([-1.0, 0.0], [1.0, 0.0], steps).unwrap();
    let still = chomp_update(&line, &DMatrix::zeros(steps, 2), &chomp).unwrap();
    ensure(still == line, "zero gradient moved the trajectory")?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = normal_matrix(steps, 2, &mut rng);
    let d = chomp.step(&g);
    let eta = chomp.config().eta;
    let a = chomp.metric();
    let mut lhs = 0.0;
    let mut rhs = 0.0;
    let ainv = a.clone().try_inverse().unwrap();
    for c in 0..2 {
        let (gc, dc) = (g.column(c).into_owned(), d.column(c).into_owned());
        lhs += gc.dot(&dc) - 0.5 * eta * dc.dot(&(a * &dc));
        rhs += gc.dot(&(&ainv * &gc)) / (2.0 * eta);
    }
    ensure(lhs > 0.0 && (lhs - rhs).abs() <= 1e-9 * rhs, "quadratic decrease identity")?;
    let twice = Chomp::new(steps, ChompConfig { eta: 2.0 * eta, ..ChompConfig::default() }).unwrap();
    ensure((twice.step(&g) * 2.0 - &d).amax() <= 1e-12 * d.amax(), "eta scaling")
}

fn local_cost_checks() -> Result<(), String> {
    let eps = 0.2;
    let delta = 1e-8;
    ensure(
        (local_collision_cost(eps - delta, eps) - local_collision_cost(eps + delta, eps)).abs() < 1e-6,
        "at d = eps",
    )?;
    ensure((local_collision_cost(-delta, eps) - local_collision_cost(delta, eps)).abs() < 1e-6, "at d = 0")?;
    ensure((local_collision_cost(0.0, eps) - 0.1).abs() < 1e-15, "value eps/2 at d = 0")
}

fn checkpoint_checks() -> Result<(), String> {
    let model = ManifoldModel::new(2, 1, &[16, 16], &[16, 16], 0.05, 8).unwrap();
    let ck = ModelCheckpoint::from_model(&model, Task::Toy { function: 2 }, &TrainConfig::toy());
    let text = ck.to_json().map_err(|e| e.to_string())?;
    let back = ModelCheckpoint::from_json(&text)?;
    ensure(back.to_json().map_err(|e| e.to_string())? == text, "save-load-save bytes differ")?;
    let z = DMatrix::from_row_slice(1, 3, &[-1.0, 0.0, 1.0]);
    let restored = back.model().map_err(|e| e.to_string())?;
    ensure(model.decode(&z) == restored.decode(&z), "decode differs after round trip")
}

fn determinism_checks() -> Result<(), String> {
    let f = ToyFunction::from_id(4).unwrap();
    let proposal = solman::proposal::BoxUniform::new(f.bounds()).unwrap();
    let cfg = TrainConfig { n_samples: 2000, epochs: 10, seed: 6, ..TrainConfig::toy() };
    let (m1, r1) = train(&f, &proposal, &cfg).unwrap();
    let (m2, r2) = train(&f, &proposal, &cfg).unwrap();
    ensure(m1 == m2 && r1.same_curves(&r2), "train() not bitwise reproducible")?;
    let cem = CemConfig { population: 400, iterations: 8, seed: 6, ..CemConfig::default() };
    let (a, b) = (cem_optimize(&f, &cem).unwrap(), cem_optimize(&f, &cem).unwrap());
    ensure(a.history == b.history && a.mixture == b.mixture, "cem_optimize() not bitwise reproducible")?;

    let mut train_table = toml::Table::new();
    train_table.insert("n_samples".into(), toml::Value::Integer(1000));
    train_table.insert("epochs".into(), toml::Value::Integer(4));
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for mode in [Mode::ToyTrain, Mode::Cem] {
        for d in &dirs {
            let cfg = ExperimentConfig {
                mode: Some(mode),
                function: 4,
                seeds: vec![0, 1],
                out: d.path().to_path_buf(),
                train: train_table.clone(),
                cem: cem.clone(),
                ..ExperimentConfig::default()
            };
            solman_cli::run(&cfg).map_err(|e| e.to_string())?;
        }
    }
    for name in [
        "metrics.csv",
        "curves_seed0.csv",
        "curves_seed1.csv",
        "cem_components.csv",
        "cem_history.csv",
        "summary.csv",
        "model_seed1.json",
    ] {
        let read = |i: usize| std::fs::read(dirs[i].path().join(name)).map_err(|e| format!("{name}: {e}"));
        ensure(read(0)? == read(1)?, format!("{name} differs between identical runs"))?;
    }
    Ok(())
}

fn criterion_8() -> Outcome {
    let checks: [Check; 7] = [
        ("KL", kl_checks),
        ("shaping", shaping_checks),
        ("weights", weight_checks),
        ("CHOMP", chomp_checks),
        ("local cost", local_cost_checks),
        ("checkpoint", checkpoint_checks),
        ("determinism", determinism_checks),
    ];
    let mut failed = Vec::new();
    for (name, check) in checks {
        if let Err(e) = check() {
            failed.push(format!("{name}: {e}"));
        }
    }
    let detail = if failed.is_empty() {
        format!("{} property groups hold", checks.len())
    } else {
        format!("failed: {}", failed.join("; "))
    };
    outcome(failed.is_empty(), detail)
}

fn main() {
    let picked: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| picked.is_empty() || picked.contains(&n);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        println!("[{}] {n}. {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, name, o));
    };

    if wanted(4) {
        report(4, "gradient oracles", criterion_4());
    }
    if wanted(5) {
        report(5, "trajectory-prior covariance", criterion_5());
    }
    if wanted(8) {
        report(8, "property suites", criterion_8());
    }
    if wanted(3) {
        report(3, "CEM baseline", criterion_3());
    }
    if wanted(1) {
        report(1, "toy manifolds, functions 1, 2, 4", criterion_1());
    }
    if wanted(2) {
        report(2, "toy manifold, function 3", criterion_2());
    }
    if wanted(6) || wanted(7) {
        let started = Instant::now();
        let models = train_planning_models();
        let minutes = started.elapsed().as_secs_f64() / 60.0;
        if wanted(6) {
            report(6, "planning manifold", criterion_6(&models, minutes));
        }
        if wanted(7) {
            report(7, "fine-tune advantage", criterion_7(&models[0].model, &models[0].prior));
        }
    }

    let failed: Vec<u32> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
