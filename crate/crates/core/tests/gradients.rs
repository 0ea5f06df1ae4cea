//! Analytic gradients against central finite differences.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use solman::lsmo::{gaussian_kl, recon_loglik, weighted_loss, ManifoldModel};
use solman::planning::{cost_gradient, trajectory_cost, CostConfig, Obstacle, Trajectory, World2D};
use solman::tinynet::DenseNet;

fn normal_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Relative error with a floor so that two tiny values do not blow up the ratio.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// `L = Σ u ⊙ net(x)`, whose parameter gradient is `backward(u)`.
fn net_loss(sizes: &[usize], params: &[f64], x: &DMatrix<f64>, u: &DMatrix<f64>) -> f64 {
    DenseNet::from_flat(sizes, params).unwrap().predict(x).dot(u)
}

fn net_grad_error(sizes: &[usize], seed: u64, batch: usize, h: f64, coords: Option<usize>) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = DenseNet::init(sizes, seed).unwrap();
    // non-zero biases so the bias gradients are exercised away from the init
    for l in net.layers_mut() {
        for b in l.bias.iter_mut() {
            *b = 0.1 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    let x = normal_matrix(sizes[0], batch, &mut rng);
    let u = normal_matrix(*sizes.last().unwrap(), batch, &mut rng);
    let (_, cache) = net.forward(&x).unwrap();
    let analytic = net.backward(&cache, &u).unwrap().0.to_flat();
    let mut params = net.to_flat();
    let picks: Vec<usize> = match coords {
        None => (0..params.len()).collect(),
        Some(n) => (0..n).map(|_| rng.random_range(0..params.len())).collect(),
    };
    let mut worst: f64 = 0.0;
    for i in picks {
        let orig = params[i];
        params[i] = orig + h;
        let up = net_loss(sizes, &params, &x, &u);
        params[i] = orig - h;
        let down = net_loss(sizes, &params, &x, &u);
        params[i] = orig;
        worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * h), 1e-6));
    }
    worst
}

#[test]
fn dense_net_backward_matches_finite_differences() {
    let err = net_grad_error(&[4, 8, 3], 11, 16, 1e-5, None);
    assert!(err < 1e-6, "max relative error {err:e}");
}

#[test]
fn dense_net_gradients_hold_across_random_architectures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for draw in 0..32u64 {
        let err = if draw < 2 {
            // the largest supported shape, checked on a random subset of parameters
            net_grad_error(&[400, 300, 300, 400], draw, 2, 1e-5, Some(64))
        } else {
            let depth = rng.random_range(2..=5);
            let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=12)).collect();
            net_grad_error(&sizes, draw, 5, 1e-5, None)
        };
        assert!(err < 1e-4, "draw {draw}: max relative error {err:e}");
    }
}

fn model_params(m: &ManifoldModel) -> Vec<f64> {
    let mut p = m.encoder().to_flat();
    p.extend(m.decoder().to_flat());
    p
}

fn model_from_params(template: &ManifoldModel, p: &[f64]) -> ManifoldModel {
    let enc_sizes = template.encoder().layer_sizes();
    let dec_sizes = template.decoder().layer_sizes();
    let split = template.encoder().param_count();
    ManifoldModel::from_parts(
        DenseNet::from_flat(&enc_sizes, &p[..split]).unwrap(),
        DenseNet::from_flat(&dec_sizes, &p[split..]).unwrap(),
        template.latent_dim(),
        template.dec_var(),
    )
    .unwrap()
}

#[test]
fn weighted_loss_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for seed in 0..6u64 {
        let model = ManifoldModel::new(2, 1, &[8, 8], &[8, 8], 0.05, seed).unwrap();
        let b = 12;
        let x = normal_matrix(2, b, &mut rng);
        let eps = normal_matrix(1, b, &mut rng);
        let weights: Vec<f64> = (0..b).map(|_| rng.random_range(0.2..2.0)).collect();
        let (gamma, capacity) = (0.7, 0.4);

        let eval = weighted_loss(&model, &x, &weights, capacity, gamma, &eps).unwrap();
        // stay away from the kink of |KL - C|
        if eval.kl_per_sample.iter().any(|k| (k - capacity).abs() < 1e-3) {
            continue;
        }
        checked += 1;
        let mut analytic = eval.encoder.to_flat();
        analytic.extend(eval.decoder.to_flat());

        let mut params = model_params(&model);
        let h = 1e-6;
        for i in 0..params.len() {
            let orig = params[i];
            params[i] = orig + h;
            let up =
                weighted_loss(&model_from_params(&model, &params), &x, &weights, capacity, gamma, &eps).unwrap().loss;
            params[i] = orig - h;
            let down =
                weighted_loss(&model_from_params(&model, &params), &x, &weights, capacity, gamma, &eps).unwrap().loss;
            params[i] = orig;
            let err = rel_err(analytic[i], (up - down) / (2.0 * h), 1e-6);
            assert!(err < 1e-4, "seed {seed} param {i}: analytic {} numeric {}", analytic[i], (up - down) / (2.0 * h));
        }
    }
    assert!(checked >= 4, "only {checked} batches were away from the kink");
}

#[test]
fn reconstruction_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let model = ManifoldModel::new(3, 2, &[6], &[7, 5], 0.3, 4).unwrap();
    let x: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<f64> = (0..2).map(|_| rng.sample(StandardNormal)).collect();

    let zmat = DMatrix::from_column_slice(2, 1, &z);
    let (xhat, cache) = model.decoder().forward(&zmat).unwrap();
    // d(log-lik)/d(x̂) = (x - x̂) / σ²
    let upstream = (DMatrix::from_column_slice(3, 1, &x) - xhat) / model.dec_var();
    let (grads, dz) = model.decoder().backward(&cache, &upstream).unwrap();
    let analytic = grads.to_flat();

    let enc = model.encoder().clone();
    let sizes = model.decoder().layer_sizes();
    let mut params = model.decoder().to_flat();
    let ll = |p: &[f64], z: &[f64]| {
        let m = ManifoldModel::from_parts(enc.clone(), DenseNet::from_flat(&sizes, p).unwrap(), 2, 0.3).unwrap();
        recon_loglik(&m, &x, z).unwrap()
    };
    let h = 1e-6;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = ll(&params, &z);
        params[i] = orig - h;
        let down = ll(&params, &z);
        params[i] = orig;
        assert!(rel_err(analytic[i], (up - down) / (2.0 * h), 1e-6) < 1e-4, "param {i}");
    }
    for c in 0..2 {
        let mut zp = z.clone();
        zp[c] += h;
        let mut zm = z.clone();
        zm[c] -= h;
        let numeric = (ll(&params, &zp) - ll(&params, &zm)) / (2.0 * h);
        assert!(rel_err(dz[(c, 0)], numeric, 1e-6) < 1e-4, "latent {c}");
    }
}

fn three_obstacle_world() -> World2D {
    World2D::new(
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
    .unwrap()
}

/// True if nudging any coordinate by `h` could move a point across a branch
/// of the local collision cost or onto an obstacle centre.
fn near_branch_boundary(world: &World2D, traj: &Trajectory, h: f64) -> bool {
    traj.points().iter().any(|p| {
        world.obstacles.iter().any(|o| {
            let r = (p[0] - o.center[0]).hypot(p[1] - o.center[1]);
            let d = r - o.radius;
            r < 10.0 * h || d.abs() < 10.0 * h || (d - world.margin).abs() < 10.0 * h
        })
    })
}

#[test]
fn trajectory_cost_gradient_matches_finite_differences() {
    let world = three_obstacle_world();
    let cfg = CostConfig { smooth_weight: 1e-3 };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let h = 1e-6;
    let mut checked = 0;
    let mut active = 0;
    while checked < 20 {
        let steps = 15;
        let base = Trajectory::straight_line(world.start, world.goal, steps).unwrap();
        let noise = normal_matrix(steps, 2, &mut rng) * 0.15;
        let traj = base.with_interior(&base.interior + noise);
        if near_branch_boundary(&world, &traj, h) {
            continue;
        }
        checked += 1;
        if trajectory_cost(&world, &traj, &cfg).obstacle > 0.0 {
            active += 1;
        }
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
                let err = rel_err(analytic[(r, c)], numeric, 1e-4 * scale);
                assert!(err < 1e-4, "waypoint {r} dof {c}: analytic {} numeric {numeric}", analytic[(r, c)]);
            }
        }
    }
    assert!(active >= 15, "only {active} of 20 trajectories touched an obstacle margin");
}

/// Accelerations written out point by point, with the virtual points that
/// continue the start-goal line beyond both ends.
fn smoothness_by_hand(traj: &Trajectory) -> f64 {
    let pts = traj.points();
    let n = pts.len();
    let mut ext = Vec::with_capacity(n + 2);
    let step = [(pts[n - 1][0] - pts[0][0]) / (n - 1) as f64, (pts[n - 1][1] - pts[0][1]) / (n - 1) as f64];
    ext.push([pts[0][0] - step[0], pts[0][1] - step[1]]);
    ext.extend(pts.iter().copied());
    ext.push([pts[n - 1][0] + step[0], pts[n - 1][1] + step[1]]);
    let dt4 = traj.dt.powi(4);
    (1..=n)
        .map(|i| {
            let ax = ext[i - 1][0] - 2.0 * ext[i][0] + ext[i + 1][0];
            let ay = ext[i - 1][1] - 2.0 * ext[i][1] + ext[i + 1][1];
            (ax * ax + ay * ay) / dt4
        })
        .sum()
}

#[test]
fn smoothness_gradient_is_metric_times_deviation() {
    let empty = World2D::new(vec![], 0.2, [[-3.0, 3.0]; 2], [-1.0, 0.5], [1.5, -0.5]).unwrap();
    let alpha = 0.37;
    let cfg = CostConfig { smooth_weight: alpha };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let steps = 12;
    let line = Trajectory::straight_line(empty.start, empty.goal, steps).unwrap();
    let traj = line.with_interior(&line.interior + normal_matrix(steps, 2, &mut rng) * 0.3);

    let cost = trajectory_cost(&empty, &traj, &cfg);
    assert!((cost.smoothness - smoothness_by_hand(&traj)).abs() <= 1e-10 * cost.smoothness);

    // The straight line has zero acceleration, so the gradient is the metric
    // applied to the deviation from it: 2 α A (ξ − ξ_line) / dt⁴.
    let k = solman::proposal::build_fd_matrix(steps).unwrap();
    let a = k.transpose() * &k;
    let expected = (&a * (&traj.interior - &line.interior)) * (2.0 * alpha / traj.dt.powi(4));
    let got = cost_gradient(&empty, &traj, &cfg);
    assert!((&got - &expected).amax() <= 1e-9 * expected.amax());

    // and against differentiating the hand-written sum directly
    let h = 1e-6;
    for r in 0..steps {
        for c in 0..2 {
            let mut up = traj.interior.clone();
            up[(r, c)] += h;
            let mut down = traj.interior.clone();
            down[(r, c)] -= h;
            let numeric = alpha
                * (smoothness_by_hand(&traj.with_interior(up)) - smoothness_by_hand(&traj.with_interior(down)))
                / (2.0 * h);
            assert!(rel_err(got[(r, c)], numeric, 1e-6) < 1e-5);
        }
    }
}

#[test]
fn kl_closed_form_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (mu, logvar) = (0.7_f64, -0.6_f64);
    let sd = (0.5 * logvar).exp();
    let n = 400_000;
    // E_q[log q(z) − log p(z)]
    let mc: f64 = (0..n)
        .map(|_| {
            let e: f64 = rng.sample(StandardNormal);
            let z = mu + sd * e;
            (-0.5 * e * e - sd.ln()) - (-0.5 * z * z)
        })
        .sum::<f64>()
        / n as f64;
    let exact = gaussian_kl(&[mu], &[logvar])[0];
    assert!((mc - exact).abs() < 5e-3, "mc {mc} exact {exact}");
}
