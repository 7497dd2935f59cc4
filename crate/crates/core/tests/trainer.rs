use fbsnn::bench::{ExperimentConfig, ExperimentOverrides};
use fbsnn::problems::{ch_driver_hat, BoundaryKind, BoundarySpec, Problem, ProblemData, ProblemKind, NavierStokesSpec};
use fbsnn::sde::{Geometry, TimeGrid};
use fbsnn::trainer::{
    build_batch, loss_and_gradient, loss_value, network_input_gradient, residual_step_ch, residual_step_chns_u,
    residual_step_ns, train, Channel, LossWeights, Model, ModelConfig, TermWeights, TrainOptions, TrainSchedule,
};

fn small_model(id: &str, overrides: &str, hidden: &[usize], seed: u64) -> Model {
    let mut cfg = ExperimentConfig::for_id(id).unwrap();
    let o: ExperimentOverrides = serde_json::from_str(overrides).unwrap();
    cfg.apply(&o).unwrap();
    let (problem, grid) = cfg.build().unwrap();
    let mc = ModelConfig {
        hidden: hidden.to_vec(),
        ..cfg.model.clone()
    };
    Model::new(problem, grid, &mc, seed).unwrap()
}

fn all_ones() -> TermWeights {
    TermWeights([1.0; 6])
}

fn opts() -> TrainOptions {
    TrainOptions {
        aux_points: 3,
        mass_points: 20,
        mass_levels: 0,
        eval_every: 0,
        ..TrainOptions::default()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Pointwise evaluation of the residual and terminal terms for problems in
/// the whole space, one network call per path point.
fn reference_terms(model: &Model, batch: &fbsnn::trainer::Batch) -> (f64, f64, f64) {
    let p = &model.problem;
    let d = p.kind.dim();
    let grid = &model.grid;
    let dt = grid.dt();
    let k = batch.paths as f64;
    let (mut res, mut term_u, mut term_phi) = (0.0, 0.0, 0.0);
    let vel = model.velocity_net();
    let phase = model.phase_net();
    let eval_phase = |t: f64, x: &[f64]| {
        let net = phase.unwrap();
        let v = net.forward_point(t, x).unwrap();
        let gphi = network_input_gradient(net, 0, t, x).unwrap();
        let gmu = network_input_gradient(net, 1, t, x).unwrap();
        (v[0], v[1], gphi, gmu)
    };
    for b in &batch.blocks {
        let paths = &b.paths;
        for kk in 0..batch.paths {
            let last = paths.terminal_step(kk);
            for n in 0..last {
                let (t0, t1) = (grid.time(n), grid.time(n + 1));
                let (x0, x1) = (paths.state(kk, n), paths.state(kk, n + 1));
                let dw = paths.increment(kk, n);
                match b.channel {
                    Channel::Velocity => {
                        let net = vel.unwrap();
                        let y = net.forward_point(t0, x0).unwrap()[..d].to_vec();
                        let z: Vec<Vec<f64>> = (0..d).map(|i| network_input_gradient(net, i, t0, x0).unwrap()).collect();
                        let gp = network_input_gradient(net, d, t0, x0).unwrap();
                        let f = p.data.force(t0, x0);
                        let target = match p.kind {
                            ProblemKind::Chns(s) => {
                                let (phi, _, _, gmu) = eval_phase(t0, x0);
                                residual_step_chns_u(&y, &z, &gp, &phi, &gmu, s.c, &f, dw, s.ns.nu, dt, &vec![0.0; d])
                            }
                            _ => residual_step_ns(&y, &z, &gp, &f, dw, p.kind.ns().unwrap().nu, dt, &vec![0.0; d]),
                        };
                        let y1 = net.forward_point(t1, x1).unwrap();
                        res += (0..d).map(|i| (target[i] - y1[i]).powi(2)).sum::<f64>();
                    }
                    Channel::PhaseHat | Channel::PotentialHat => {
                        let diag = *model.diagonalization().unwrap();
                        let ch = *p.kind.ch().unwrap();
                        let j = if b.channel == Channel::PhaseHat { 0 } else { 1 };
                        let r = diag.r_inv[j];
                        let (phi, mu, gphi, gmu) = eval_phase(t0, x0);
                        let conv = match vel {
                            Some(net) => dot(&net.forward_point(t0, x0).unwrap()[..d], &gphi),
                            None => 0.0,
                        };
                        let (f1, f2) = ch_driver_hat(&phi, &mu, &conv, &p.data.phase_source(t0, x0), &ch, &diag);
                        let y_hat = r[0] * phi + r[1] * mu;
                        let z_hat: Vec<f64> = (0..d).map(|i| r[0] * gphi[i] + r[1] * gmu[i]).collect();
                        let lambda = if j == 0 { diag.lambda1 } else { diag.lambda2 };
                        let target = residual_step_ch(&y_hat, if j == 0 { &f1 } else { &f2 }, &z_hat, dw, lambda, dt, &0.0);
                        let (phi1, mu1, _, _) = eval_phase(t1, x1);
                        res += (target - (r[0] * phi1 + r[1] * mu1)).powi(2);
                    }
                }
            }
            let xe = paths.state(kk, last);
            let te = grid.time(last);
            if let Some(net) = vel {
                let y = net.forward_point(te, xe).unwrap();
                let g = p.data.terminal_velocity(xe);
                term_u += (0..d).map(|i| (y[i] - g[i]).powi(2)).sum::<f64>();
            }
            if let Some(net) = phase {
                let y = net.forward_point(te, xe).unwrap();
                term_phi += (y[0] - p.data.terminal_phase(xe)).powi(2);
            }
        }
    }
    let c = batch.blocks.len() as f64;
    (res / (k * batch.steps as f64), term_u / (k * c), term_phi / (k * c))
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1e-300)
}

#[test]
fn batched_loss_matches_pointwise_reference() {
    let cases = [
        ("tg2d", r#"{"steps": 3}"#),
        ("abc3d", r#"{"steps": 2}"#),
        ("ch-freespace", r#"{"steps": 3}"#),
        ("chns-exact", r#"{"steps": 3}"#),
    ];
    for (id, o) in cases {
        let model = small_model(id, o, &[5, 5], 3);
        let batch = build_batch(&model, 4, 0, 11, &opts(), None).unwrap();
        let loss = loss_value(&model, &batch, &all_ones()).unwrap();
        let (res, tu, tphi) = reference_terms(&model, &batch);
        assert!(close(loss.residual, res, 1e-10), "{id}: residual {} vs {res}", loss.residual);
        match model.problem.kind {
            ProblemKind::NavierStokes(_) => assert!(close(loss.terminal, tu, 1e-12), "{id}"),
            ProblemKind::CahnHilliard(_) => assert!(close(loss.terminal_phase, tphi, 1e-12), "{id}"),
            ProblemKind::Chns(_) => {
                assert!(close(loss.terminal, tu, 1e-12), "{id}");
                assert!(close(loss.terminal_phase, tphi, 1e-12), "{id}");
            }
        }
        let sum: f64 = loss.parts().iter().sum();
        assert!((loss.total - sum).abs() <= 1e-12 * sum.max(1.0), "{id}");
        assert!(loss.parts().iter().all(|v| *v >= 0.0));
    }
}

fn fd_check(model: &Model, batch: &fbsnn::trainer::Batch, weights: &TermWeights) -> f64 {
    let (_, grad) = loss_and_gradient(model, batch, weights).unwrap();
    let base = model.flat_params();
    let mut m = model.clone();
    let h = 1e-6;
    let mut num = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        m.set_flat_params(&p).unwrap();
        let up = loss_value(&m, batch, weights).unwrap().total;
        p[i] = base[i] - h;
        m.set_flat_params(&p).unwrap();
        let down = loss_value(&m, batch, weights).unwrap().total;
        num[i] = (up - down) / (2.0 * h);
    }
    let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / norm
}

#[test]
fn parameter_gradient_matches_finite_differences() {
    let model = small_model("ch-freespace", r#"{"dim": 1, "steps": 2}"#, &[2, 2], 5);
    let batch = build_batch(&model, 2, 0, 3, &opts(), None).unwrap();
    let err = fd_check(&model, &batch, &all_ones());
    assert!(err <= 1e-5, "ch d=1: {err}");
}

#[test]
fn parameter_gradient_matches_finite_differences_across_problems() {
    let cases = [
        ("tg2d", r#"{"steps": 2}"#),
        ("tg2d-neumann", r#"{"steps": 2, "nu": 2.0}"#),
        ("tg2d-dirichlet", r#"{"steps": 2, "nu": 2.0}"#),
        ("cavity", r#"{"steps": 2}"#),
        ("chns-exact", r#"{"steps": 2}"#),
        ("chns-bubbles", r#"{"steps": 2, "horizon": 0.02}"#),
    ];
    for (id, o) in cases {
        let model = small_model(id, o, &[3, 3], 9);
        let q = fbsnn::trainer::MassQuadrature::new(&model.problem, 20, 1).unwrap();
        let batch = build_batch(&model, 3, 0, 4, &opts(), Some(&q)).unwrap();
        let err = fd_check(&model, &batch, &all_ones());
        assert!(err <= 1e-5, "{id}: {err}");
    }
}

fn constant_network(model: &mut Model, values: &[Vec<f64>]) {
    for (net, v) in model.networks.iter_mut().zip(values) {
        let mut flat = vec![0.0; net.params.num_params()];
        let n = flat.len();
        flat[n - v.len()..].copy_from_slice(v);
        net.params.set_flat(&flat).unwrap();
    }
}

#[test]
fn constant_field_with_matching_data_has_zero_loss() {
    let square = Geometry::Box {
        lo: vec![0.0, 0.0],
        hi: vec![1.0, 1.0],
    };
    let problem = Problem {
        kind: ProblemKind::NavierStokes(NavierStokesSpec { dim: 2, nu: 0.5 }),
        horizon: 0.5,
        domain: square.clone(),
        boundary: BoundarySpec {
            kind: BoundaryKind::Dirichlet,
            geometry: square,
            reflect_parts: Vec::new(),
            periods: None,
        },
        data: ProblemData::Uniform {
            velocity: vec![0.3, -0.7],
            phase: 0.0,
        },
    };
    let grid = TimeGrid::new(0.5, 5).unwrap();
    let mut model = Model::new(problem, grid, &ModelConfig::default(), 1).unwrap();
    constant_network(&mut model, &[vec![0.3, -0.7, 2.0]]);
    let batch = build_batch(&model, 50, 0, 8, &opts(), None).unwrap();
    let exited = (0..50).filter(|&k| batch.blocks[0].paths.exit(k).is_some()).count();
    assert!(exited > 0);
    let loss = loss_value(&model, &batch, &all_ones()).unwrap();
    assert!(loss.residual <= 1e-12 && loss.terminal <= 1e-12 && loss.divergence <= 1e-12, "{loss:?}");
}

#[test]
fn rest_phase_with_mixed_boundary_has_zero_loss() {
    let (mut problem, grid) = ExperimentConfig::for_id("ch-mixed").unwrap().build().unwrap();
    problem.data = ProblemData::Uniform {
        velocity: Vec::new(),
        phase: 1.0,
    };
    let mut model = Model::new(problem, grid, &ModelConfig::default(), 2).unwrap();
    constant_network(&mut model, &[vec![1.0, 0.0]]);
    let batch = build_batch(&model, 50, 0, 8, &opts(), None).unwrap();
    let loss = loss_value(&model, &batch, &all_ones()).unwrap();
    assert!(loss.residual <= 1e-12 && loss.terminal_phase <= 1e-12, "{loss:?}");
}

#[test]
fn inlet_term_of_zero_network_is_u_in_squared() {
    let mut model = small_model("obstacle", r#"{"steps": 2}"#, &[4, 4], 0);
    constant_network(&mut model, &[vec![0.0, 0.0, 0.0]]);
    let batch = build_batch(&model, 5, 0, 1, &opts(), None).unwrap();
    let loss = loss_value(&model, &batch, &all_ones()).unwrap();
    assert!((loss.boundary_extra - 9.0).abs() <= 1e-12, "{loss:?}");
}

#[test]
fn lid_term_of_zero_network_is_one() {
    let mut model = small_model("cavity", r#"{"steps": 2}"#, &[4, 4], 0);
    constant_network(&mut model, &[vec![0.0, 0.0, 0.0]]);
    let batch = build_batch(&model, 5, 0, 1, &opts(), None).unwrap();
    let zero = loss_value(&model, &batch, &all_ones()).unwrap();
    assert!((zero.boundary_extra - 1.0).abs() <= 1e-12, "{zero:?}");
}

#[test]
fn mass_term_of_unit_offset_is_volume_squared() {
    let mut model = small_model("chns-bubbles", r#"{"steps": 4, "horizon": 0.04}"#, &[4, 4], 0);
    let q = fbsnn::trainer::MassQuadrature::new(&model.problem, 200, 5).unwrap();
    let volume = 4.0;
    let offset = q.target() / volume + 1.0;
    constant_network(&mut model, &[vec![0.0; 3], vec![offset, 0.0]]);
    let batch = build_batch(&model, 2, 0, 1, &opts(), Some(&q)).unwrap();
    let loss = loss_value(&model, &batch, &all_ones()).unwrap();
    assert!((loss.mass - volume * volume).abs() <= 1e-10, "{loss:?}");
}

#[test]
fn doubling_alpha1_doubles_terminal_contribution() {
    let model = small_model("tg2d", r#"{"steps": 2}"#, &[4, 4], 0);
    let batch = build_batch(&model, 5, 0, 1, &opts(), None).unwrap();
    let w1 = TermWeights::for_problem(&model.problem, &LossWeights::new(0.1, 0.0, 0.0).unwrap());
    let w2 = TermWeights::for_problem(&model.problem, &LossWeights::new(0.2, 0.0, 0.0).unwrap());
    let a = loss_value(&model, &batch, &w1).unwrap();
    let b = loss_value(&model, &batch, &w2).unwrap();
    assert!(((b.total - b.residual) - 2.0 * (a.total - a.residual)).abs() <= 1e-14);
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let mut model = small_model("tg2d", r#"{"steps": 2}"#, &[6, 6], 4);
        let mut s = TrainSchedule::scaled(10);
        s.batch = 8;
        let out = train(&mut model, &s, &LossWeights::new(0.1, 0.1, 0.0).unwrap(), 4, &opts()).unwrap();
        (out.history, model.flat_params())
    };
    let (h1, p1) = run();
    let (h2, p2) = run();
    assert_eq!(h1, h2);
    assert_eq!(p1, p2);
    assert_eq!(h1.len(), 10);
}

#[test]
fn zero_iterations_leave_networks_unchanged() {
    let mut model = small_model("ch-freespace", "{}", &[6, 6], 4);
    let before = model.flat_params();
    let s = TrainSchedule::scaled(0);
    let out = train(&mut model, &s, &LossWeights::new(0.01, 0.0, 0.0).unwrap(), 4, &opts()).unwrap();
    assert!(out.history.is_empty());
    assert_eq!(model.flat_params(), before);
}

#[test]
fn training_reduces_loss() {
    let mut model = small_model("tg2d", "{}", &[10, 10], 1);
    let s = TrainSchedule::scaled(300);
    let out = train(&mut model, &s, &LossWeights::new(0.1, 0.1, 0.0).unwrap(), 1, &opts()).unwrap();
    let first = out.history[0].loss.total;
    let last = out.history.last().unwrap().loss.total;
    assert!(last < first, "{first} -> {last}");
}
