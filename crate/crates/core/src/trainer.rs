//! Discrete backward residuals, loss assembly and the Adam training loop.

use std::io::Write;
use std::path::PathBuf;
use std::rc::Rc;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::fnn::{Activation, BoundParams, Checkpoint, Network, OutputWrapper, PeriodicEmbedding, DEFAULT_HIDDEN};
use crate::metrics::{relative_errors, relative_errors_vector, RelativeErrors};
use crate::problems::{
    ch_driver_hat, chns_u_driver, ns_driver, BoundaryKind, ChDiagonalization, Problem, ProblemData, ProblemKind,
};
use crate::sde::{
    brownian_batch, euler_forward, lhs_on_face, mix_seed, rng_for, BoundaryMode, Geometry, PathBundle, TimeGrid,
};

/// `Ỹ = Y − F dt + noise − ΔY`.
pub fn euler_target<S: Scalar>(y: &S, drift: &S, noise: &S, dt: f64, correction: &S) -> S {
    y.sub(&drift.scale(dt)).add(noise).sub(correction)
}

fn noise<S: Scalar>(z: &[S], dw: &[S], sigma: f64) -> S {
    let mut acc = z[0].mul(&dw[0]);
    for (zj, wj) in z.iter().zip(dw).skip(1) {
        acc = acc.add(&zj.mul(wj));
    }
    acc.scale(sigma)
}

/// Velocity reference value `Y − (f + ∇P + (Y·∇)Y) dt + √(2ν) Zᵀ ΔW − ΔY`,
/// with `z[i][j] = ∂Y_i/∂x_j`.
#[allow(clippy::too_many_arguments)]
pub fn residual_step_ns<S: Scalar>(
    y: &[S],
    z: &[Vec<S>],
    grad_p: &[S],
    f: &[S],
    dw: &[S],
    nu: f64,
    dt: f64,
    correction: &[S],
) -> Vec<S> {
    let drift = ns_driver(y, z, grad_p, f);
    let sigma = (2.0 * nu).sqrt();
    (0..y.len())
        .map(|i| euler_target(&y[i], &drift[i], &noise(&z[i], dw, sigma), dt, &correction[i]))
        .collect()
}

/// Velocity reference value of the coupled system (capillary term added).
#[allow(clippy::too_many_arguments)]
pub fn residual_step_chns_u<S: Scalar>(
    y: &[S],
    z: &[Vec<S>],
    grad_p: &[S],
    phi: &S,
    grad_mu: &[S],
    c: f64,
    f1: &[S],
    dw: &[S],
    nu: f64,
    dt: f64,
    correction: &[S],
) -> Vec<S> {
    let drift = chns_u_driver(y, z, grad_p, phi, grad_mu, c, f1);
    let sigma = (2.0 * nu).sqrt();
    (0..y.len())
        .map(|i| euler_target(&y[i], &drift[i], &noise(&z[i], dw, sigma), dt, &correction[i]))
        .collect()
}

/// Rotated phase-field reference value `Ŷ − F̂ dt + √(2λ) Ẑ·ΔW − ΔY`.
pub fn residual_step_ch<S: Scalar>(y_hat: &S, f_hat: &S, z_hat: &[S], dw: &[S], lambda: f64, dt: f64, correction: &S) -> S {
    euler_target(y_hat, f_hat, &noise(z_hat, dw, (2.0 * lambda).sqrt()), dt, correction)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    #[serde(default)]
    pub alpha3: f64,
}

impl LossWeights {
    pub fn new(alpha1: f64, alpha2: f64, alpha3: f64) -> Result<Self> {
        let w = Self { alpha1, alpha2, alpha3 };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Configuration(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub const LEARNING_RATES: [f64; 4] = [5e-3, 5e-4, 5e-5, 5e-6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// `(iterations, learning rate)` per segment.
    pub segments: Vec<(usize, f64)>,
    /// Initial points per iteration (`K`).
    pub batch: usize,
    #[serde(default)]
    pub adam: AdamConfig,
}

impl TrainSchedule {
    /// `2e4 / 3e4 / 3e4 / 2e4` iterations.
    pub fn full() -> Self {
        Self::from_counts([20_000, 30_000, 30_000, 20_000])
    }

    /// Full schedule scaled to 2e4 iterations.
    pub fn desk() -> Self {
        Self::scaled(20_000)
    }

    /// Full schedule with segment lengths scaled to `total` iterations.
    pub fn scaled(total: usize) -> Self {
        let a = total / 5;
        let b = total * 3 / 10;
        Self::from_counts([a, b, b, total - a - 2 * b])
    }

    fn from_counts(counts: [usize; 4]) -> Self {
        Self {
            segments: counts.iter().copied().zip(LEARNING_RATES).collect(),
            batch: 100,
            adam: AdamConfig::default(),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.segments.iter().map(|s| s.0).sum()
    }

    /// Iteration counts at which each segment ends.
    pub fn segment_ends(&self) -> Vec<usize> {
        self.segments
            .iter()
            .scan(0, |acc, s| {
                *acc += s.0;
                Some(*acc)
            })
            .collect()
    }

    pub fn lr_at(&self, iteration: usize) -> f64 {
        schedule_lr(self, iteration)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Configuration("batch size K must be positive".into()));
        }
        if self.segments.iter().any(|s| !(s.1 > 0.0 && s.1.is_finite())) {
            return Err(Error::Configuration("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate of the segment containing `iteration` (the last rate past
/// the end of the schedule).
pub fn schedule_lr(schedule: &TrainSchedule, iteration: usize) -> f64 {
    let mut end = 0;
    for &(count, lr) in &schedule.segments {
        end += count;
        if iteration < end {
            return lr;
        }
    }
    schedule.segments.last().map_or(0.0, |s| s.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(size: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; size],
            v: vec![0.0; size],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        adam_step(params, grads, self, lr)
    }
}

/// Bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut Adam, lr: f64) -> Result<()> {
    if params.len() != state.m.len() || grads.len() != params.len() {
        return Err(Error::Configuration(format!(
            "optimizer state holds {} entries, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.t += 1;
    let c1 = 1.0 - beta1.powi(state.t as i32);
    let c2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + eps);
    }
    Ok(())
}

/// Unweighted loss parts and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub residual: f64,
    /// Velocity terminal term (or the phase term for Cahn–Hilliard alone).
    pub terminal: f64,
    /// Phase terminal term of the coupled system.
    pub terminal_phase: f64,
    pub divergence: f64,
    pub boundary_extra: f64,
    pub mass: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> [f64; 6] {
        [
            self.residual,
            self.terminal,
            self.terminal_phase,
            self.divergence,
            self.boundary_extra,
            self.mass,
        ]
    }

    pub fn weighted_sum(&self, w: &TermWeights) -> f64 {
        self.parts().iter().zip(&w.0).map(|(p, w)| p * w).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|v| v.is_finite()) && self.total.is_finite()
    }
}

/// Weights of the six loss parts in [`LossBreakdown::parts`] order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights(pub [f64; 6]);

impl TermWeights {
    /// NS: `α₁` terminal, `α₂` divergence, `α₃` boundary terms. CH: `α₁`
    /// terminal. Coupled: `α₁` velocity terminal, `α₂` phase terminal, `α₃`
    /// divergence. The mass term has unit weight.
    pub fn for_problem(problem: &Problem, w: &LossWeights) -> Self {
        let mass = if matches!(problem.data, ProblemData::Bubbles { .. }) { 1.0 } else { 0.0 };
        match problem.kind {
            ProblemKind::NavierStokes(_) => Self([1.0, w.alpha1, 0.0, w.alpha2, w.alpha3, mass]),
            ProblemKind::CahnHilliard(_) => Self([1.0, 0.0, w.alpha1, 0.0, 0.0, mass]),
            ProblemKind::Chns(_) => Self([1.0, w.alpha1, w.alpha2, w.alpha3, 0.0, mass]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub velocity_activation: Activation,
    pub phase_activation: Activation,
    /// Order `J` of the periodic embedding.
    pub periodic_order: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            velocity_activation: Activation::Cosine,
            phase_activation: Activation::Cosine,
            periodic_order: 1,
        }
    }
}

/// Forward-process channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Channel {
    Velocity,
    PhaseHat,
    PotentialHat,
}

/// A problem together with its time grid and solution networks: one
/// network `(u, p)` for velocity problems and one `(φ, μ)` for phase
/// problems.
#[derive(Clone, Debug)]
pub struct Model {
    pub problem: Problem,
    pub grid: TimeGrid,
    pub networks: Vec<Network>,
    velocity: Option<usize>,
    phase: Option<usize>,
    diag: Option<ChDiagonalization>,
}

impl Model {
    pub fn new(problem: Problem, grid: TimeGrid, config: &ModelConfig, seed: u64) -> Result<Self> {
        problem.validate(&grid)?;
        let d = problem.kind.dim();
        let embedding = match &problem.boundary.periods {
            Some(p) => Some(PeriodicEmbedding::new(p.clone(), config.periodic_order)?),
            None => None,
        };
        let wrapper = match problem.data {
            ProblemData::Cavity => OutputWrapper::Cavity,
            ProblemData::Obstacle { .. } => OutputWrapper::Obstacle,
            _ => OutputWrapper::None,
        };
        let mut networks = Vec::new();
        if problem.kind.ns().is_some() {
            networks.push(Network::init(
                mix_seed(&[seed, 0x1E7, 0]),
                d,
                &config.hidden,
                d + 1,
                config.velocity_activation,
                embedding.clone(),
                wrapper,
            )?);
        }
        if problem.kind.ch().is_some() {
            networks.push(Network::init(
                mix_seed(&[seed, 0x1E7, 1]),
                d,
                &config.hidden,
                2,
                config.phase_activation,
                embedding,
                OutputWrapper::None,
            )?);
        }
        Self::from_networks(problem, grid, networks)
    }

    pub fn from_networks(problem: Problem, grid: TimeGrid, networks: Vec<Network>) -> Result<Self> {
        problem.validate(&grid)?;
        let d = problem.kind.dim();
        let mut next = 0;
        let mut take = |outputs: usize| -> Result<usize> {
            let i = next;
            next += 1;
            let net = networks
                .get(i)
                .ok_or_else(|| Error::Configuration("missing solution network".into()))?;
            if net.outputs() != outputs || net.space_dim != d {
                return Err(Error::Configuration(format!(
                    "network {i} has {} outputs in d = {}, expected {outputs} in d = {d}",
                    net.outputs(),
                    net.space_dim
                )));
            }
            Ok(i)
        };
        let velocity = problem.kind.ns().map(|_| take(d + 1)).transpose()?;
        let phase = problem.kind.ch().map(|_| take(2)).transpose()?;
        if networks.len() != next {
            return Err(Error::Configuration(format!(
                "expected {next} networks, got {}",
                networks.len()
            )));
        }
        if velocity.is_some() && phase.is_some() && !matches!(problem.boundary.kind, BoundaryKind::WholeSpace | BoundaryKind::Periodic) {
            return Err(Error::Configuration(
                "the coupled system is supported in the whole space or with periodic embedding".into(),
            ));
        }
        let diag = problem.kind.ch().map(|c| c.diagonalize()).transpose()?;
        Ok(Self {
            problem,
            grid,
            networks,
            velocity,
            phase,
            diag,
        })
    }

    pub fn velocity_net(&self) -> Option<&Network> {
        self.velocity.map(|i| &self.networks[i])
    }

    pub fn phase_net(&self) -> Option<&Network> {
        self.phase.map(|i| &self.networks[i])
    }

    pub fn diagonalization(&self) -> Option<&ChDiagonalization> {
        self.diag.as_ref()
    }

    pub fn channels(&self) -> Vec<Channel> {
        let mut out = Vec::new();
        if self.velocity.is_some() {
            out.push(Channel::Velocity);
        }
        if self.phase.is_some() {
            out.push(Channel::PhaseHat);
            out.push(Channel::PotentialHat);
        }
        out
    }

    pub fn coefficient(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Velocity => self.problem.kind.ns().expect("velocity problem").nu,
            Channel::PhaseHat => self.diag.expect("phase problem").lambda1,
            Channel::PotentialHat => self.diag.expect("phase problem").lambda2,
        }
    }

    pub fn mode(&self, channel: Channel) -> BoundaryMode {
        let b = &self.problem.boundary;
        match channel {
            Channel::Velocity => b.velocity_mode(),
            Channel::PhaseHat => b.phase_mode(),
            Channel::PotentialHat => b.potential_mode(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.networks.iter().map(|n| n.params.num_params()).sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.networks.iter().flat_map(|n| n.params.flat()).collect()
    }

    pub fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Configuration(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut pos = 0;
        for net in &mut self.networks {
            let n = net.params.num_params();
            net.params.set_flat(&values[pos..pos + n])?;
            pos += n;
        }
        Ok(())
    }
}

/// Input gradient `∇_x` of output `output` of `net` at `(t, x)`, treating
/// the parameters as constants.
pub fn network_input_gradient(net: &Network, output: usize, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let bound = net.params.bind(&tape, false);
    let tv = tape.constant(Array::scalar(t));
    let xv = tape.var(Array::new(1, x.len(), x.to_vec())?);
    let y = net.forward(&bound, tv, xv)?;
    let g = tape.grad_wrt(&y.col(output)?.sum(), &[xv])?;
    Ok(g[0].data().to_vec())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    /// Test-error interval in iterations (0 disables).
    pub eval_every: usize,
    pub eval_points: usize,
    /// Boundary points per time level for the lid, inlet and outflow terms.
    pub aux_points: usize,
    /// Fixed Monte Carlo points of the mass integral.
    pub mass_points: usize,
    /// Time levels of the mass term per iteration (0 uses all levels).
    pub mass_levels: usize,
    /// Fraction of iterations trained on the second half of the backward
    /// horizon only (closest to the terminal data).
    pub curriculum: Option<f64>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            eval_every: 1000,
            eval_points: 1000,
            aux_points: 100,
            mass_points: 10_000,
            mass_levels: 2,
            curriculum: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum AuxKind {
    Lid,
    Inlet,
    Outflow,
}

#[derive(Clone, Debug)]
struct AuxBlock {
    kind: AuxKind,
    offset: usize,
    len: usize,
}

/// Rows of one channel inside a [`Batch`].
#[derive(Clone, Debug)]
pub struct Block {
    pub channel: Channel,
    pub offset: usize,
    pub len: usize,
    pub sigma: f64,
    /// Local rows of states with an active step, and of their successors.
    from: Rc<[usize]>,
    to: Rc<[usize]>,
    /// Local row of each path's terminal state.
    ends: Rc<[usize]>,
    /// Increments of the step leaving each row (zero without a step).
    dw: Array,
    /// Reflection corrections `ΔY` of the step leaving each row.
    correction: Array,
    force: Option<Array>,
    source: Option<Array>,
    end_velocity: Option<(Array, Array)>,
    end_phase: Option<Array>,
    pub paths: PathBundle,
}

impl Block {
    pub fn steps(&self) -> usize {
        self.from.len()
    }
}

/// Fixed quadrature points of the mass integral.
#[derive(Clone, Debug)]
pub struct MassQuadrature {
    points: Array,
    volume: f64,
    target: f64,
}

impl MassQuadrature {
    pub fn new(problem: &Problem, points: usize, seed: u64) -> Result<Self> {
        let pts = problem.domain.sample(points, seed)?;
        let volume = problem.domain.volume();
        let mean = (0..points).map(|r| problem.data.terminal_phase(pts.row_slice(r))).sum::<f64>() / points as f64;
        Ok(Self {
            points: pts,
            volume,
            target: volume * mean,
        })
    }

    pub fn target(&self) -> f64 {
        self.target
    }
}

#[derive(Clone, Debug)]
struct MassBatch {
    t: Vec<f64>,
    x: Array,
    levels: usize,
    points: usize,
    volume: f64,
    target: f64,
}

/// Everything one loss evaluation needs: sampled paths, their rows, and
/// the data attached to them.
#[derive(Clone, Debug)]
pub struct Batch {
    pub dim: usize,
    pub paths: usize,
    pub steps: usize,
    pub dt: f64,
    t: Vec<f64>,
    x: Array,
    main_rows: usize,
    pub blocks: Vec<Block>,
    aux: Vec<AuxBlock>,
    aux_points: usize,
    mass: Option<MassBatch>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.t.len()
    }
}

fn correction_for(model: &Model, channel: Channel, t: f64, foot: &[f64], part: usize) -> Result<Vec<f64>> {
    let p = &model.problem;
    let normal = p.boundary.geometry.normal(part, foot);
    let missing = || Error::Configuration("Neumann data unavailable for this problem".into());
    match channel {
        Channel::Velocity => {
            if let ProblemData::Obstacle { .. } = p.data {
                let nu = p.kind.ns().expect("velocity problem").nu;
                let net = model.velocity_net().expect("velocity network");
                let pressure = net.forward_point(t, foot)?[p.kind.dim()];
                return Ok(normal.iter().map(|n| -pressure / nu * n).collect());
            }
            p.data.velocity_flux(t, foot, &normal).ok_or_else(missing)
        }
        Channel::PhaseHat | Channel::PotentialHat => {
            let diag = model.diag.expect("phase problem");
            let row = if channel == Channel::PhaseHat { 0 } else { 1 };
            let dphi = if p.boundary.kind == BoundaryKind::Mixed {
                let g = network_input_gradient(model.phase_net().expect("phase network"), 0, t, foot)?;
                g.iter().zip(&normal).map(|(a, b)| a * b).sum()
            } else {
                p.data.phase_flux(t, foot, &normal).ok_or_else(missing)?
            };
            let dmu = p.data.potential_flux(t, foot, &normal).ok_or_else(missing)?;
            Ok(vec![diag.r_inv[row][0] * dphi + diag.r_inv[row][1] * dmu])
        }
    }
}

/// Sample initial points, Brownian increments and paths for one iteration
/// and lay out the network rows. `start` skips the first time levels.
pub fn build_batch(
    model: &Model,
    paths: usize,
    start: usize,
    seed: u64,
    opts: &TrainOptions,
    mass: Option<&MassQuadrature>,
) -> Result<Batch> {
    let p = &model.problem;
    let d = p.kind.dim();
    let grid = &model.grid;
    if start >= grid.steps() {
        return Err(Error::Configuration("curriculum start must precede the last step".into()));
    }
    let steps = grid.steps() - start;
    let dt = grid.dt();
    let time = |n: usize| grid.time(start + n);
    let x0 = p.domain.sample(paths, mix_seed(&[seed, 1]))?;
    let channels = model.channels();
    let bm = brownian_batch(paths, steps, d, channels.len(), dt, mix_seed(&[seed, 2]))?;

    let mut t = Vec::new();
    let mut xs: Vec<f64> = Vec::new();
    let mut blocks = Vec::new();
    for (ci, &channel) in channels.iter().enumerate() {
        let coef = model.coefficient(channel);
        let bundle = euler_forward(&x0, coef, &bm, ci, &p.boundary.geometry, &model.mode(channel))?;
        let offset = t.len();
        let mut local = vec![usize::MAX; paths * (steps + 1)];
        for k in 0..paths {
            for n in 0..=bundle.terminal_step(k) {
                local[k * (steps + 1) + n] = t.len() - offset;
                t.push(time(n));
                xs.extend_from_slice(bundle.state(k, n));
            }
        }
        let len = t.len() - offset;
        let width = if channel == Channel::Velocity { d } else { 1 };
        let mut dw = Array::zeros(len, d);
        let mut correction = Array::zeros(len, width);
        let (mut from, mut to, mut ends) = (Vec::new(), Vec::new(), Vec::with_capacity(paths));
        for k in 0..paths {
            let last = bundle.terminal_step(k);
            for n in 0..last {
                let r = local[k * (steps + 1) + n];
                from.push(r);
                to.push(local[k * (steps + 1) + n + 1]);
                for (j, w) in bundle.increment(k, n).iter().enumerate() {
                    dw.set(r, j, *w);
                }
            }
            ends.push(local[k * (steps + 1) + last]);
        }
        for refl in bundle.reflections() {
            let r = local[refl.path * (steps + 1) + refl.step - 1];
            let q = correction_for(model, channel, time(refl.step), &refl.foot, refl.part)?;
            for (j, v) in q.iter().enumerate() {
                correction.set(r, j, correction.get(r, j) + v * refl.distance);
            }
        }
        let row_x = |r: usize| &xs[(offset + r) * d..(offset + r + 1) * d];
        let (force, source) = match channel {
            Channel::Velocity => {
                let mut f = Array::zeros(len, d);
                for r in 0..len {
                    for (j, v) in p.data.force(t[offset + r], row_x(r)).into_iter().enumerate() {
                        f.set(r, j, v);
                    }
                }
                (Some(f), None)
            }
            _ => {
                let col = (0..len).map(|r| p.data.phase_source(t[offset + r], row_x(r))).collect();
                (None, Some(Array::column(col)))
            }
        };
        let mut end_velocity = None;
        let mut end_phase = None;
        if model.velocity.is_some() {
            let mut data = Array::zeros(paths, d);
            let mut mask = Array::filled(paths, d, 1.0);
            for k in 0..paths {
                let x = bundle.state(k, bundle.terminal_step(k));
                let (vals, m) = match bundle.exit(k) {
                    Some(e) => p.data.boundary_velocity(time(e.step), x, e.part),
                    None => (p.data.terminal_velocity(x), vec![true; d]),
                };
                for j in 0..d {
                    data.set(k, j, vals[j]);
                    mask.set(k, j, if m[j] { 1.0 } else { 0.0 });
                }
            }
            end_velocity = Some((data, mask));
        }
        if model.phase.is_some() {
            let col = (0..paths)
                .map(|k| {
                    let x = bundle.state(k, bundle.terminal_step(k));
                    match bundle.exit(k) {
                        Some(e) => p.data.boundary_phase(time(e.step), x),
                        None => p.data.terminal_phase(x),
                    }
                })
                .collect();
            end_phase = Some(Array::column(col));
        }
        blocks.push(Block {
            channel,
            offset,
            len,
            sigma: (2.0 * coef).sqrt(),
            from: from.into(),
            to: to.into(),
            ends: ends.into(),
            dw,
            correction,
            force,
            source,
            end_velocity,
            end_phase,
            paths: bundle,
        });
    }
    let main_rows = t.len();

    let mut aux = Vec::new();
    let faces: Vec<(AuxKind, usize, bool)> = match p.data {
        ProblemData::Cavity => vec![(AuxKind::Lid, 1, true)],
        ProblemData::Obstacle { .. } => vec![(AuxKind::Inlet, 0, false), (AuxKind::Outflow, 0, true)],
        _ => Vec::new(),
    };
    if !faces.is_empty() {
        let (lo, hi) = match &p.boundary.geometry {
            Geometry::Box { lo, hi } | Geometry::BoxMinusDisk { lo, hi, .. } => (lo.clone(), hi.clone()),
            _ => return Err(Error::Configuration("boundary terms need a box-shaped domain".into())),
        };
        for (fi, (kind, axis, upper)) in faces.into_iter().enumerate() {
            let offset = t.len();
            let value = if upper { hi[axis] } else { lo[axis] };
            for n in 0..=steps {
                let pts = lhs_on_face(opts.aux_points, &lo, &hi, axis, value, mix_seed(&[seed, 3, fi as u64, n as u64]))?;
                for r in 0..opts.aux_points {
                    t.push(time(n));
                    xs.extend_from_slice(pts.row_slice(r));
                }
            }
            aux.push(AuxBlock {
                kind,
                offset,
                len: t.len() - offset,
            });
        }
    }

    let mass = match (mass, model.phase.is_some()) {
        (Some(q), true) => {
            let all = steps + 1;
            let levels = if opts.mass_levels == 0 { all } else { opts.mass_levels.min(all) };
            let mut rng = rng_for(&[seed, 4]);
            let mut chosen: Vec<usize> = sample_indices(&mut rng, all, levels).into_vec();
            chosen.sort_unstable();
            let np = q.points.rows();
            let mut mt = Vec::with_capacity(levels * np);
            let mut mx = Vec::with_capacity(levels * np * d);
            for &n in &chosen {
                for r in 0..np {
                    mt.push(time(n));
                    mx.extend_from_slice(q.points.row_slice(r));
                }
            }
            Some(MassBatch {
                t: mt,
                x: Array::new(levels * np, d, mx)?,
                levels,
                points: np,
                volume: q.volume,
                target: q.target,
            })
        }
        _ => None,
    };

    let rows = t.len();
    Ok(Batch {
        dim: d,
        paths,
        steps,
        dt,
        t,
        x: Array::new(rows, d, xs)?,
        main_rows,
        blocks,
        aux,
        aux_points: opts.aux_points,
        mass,
    })
}

/// Loss parts recorded on a tape.
pub struct LossVars<'t> {
    pub residual: Var<'t>,
    pub terminal: Var<'t>,
    pub terminal_phase: Var<'t>,
    pub divergence: Var<'t>,
    pub boundary_extra: Var<'t>,
    pub mass: Var<'t>,
    pub total: Var<'t>,
}

impl LossVars<'_> {
    pub fn breakdown(&self) -> LossBreakdown {
        LossBreakdown {
            residual: self.residual.item(),
            terminal: self.terminal.item(),
            terminal_phase: self.terminal_phase.item(),
            divergence: self.divergence.item(),
            boundary_extra: self.boundary_extra.item(),
            mass: self.mass.item(),
            total: self.total.item(),
        }
    }
}

struct Acc<'t> {
    sum: Option<Var<'t>>,
}

impl<'t> Acc<'t> {
    fn new() -> Self {
        Self { sum: None }
    }

    fn push(&mut self, v: Var<'t>) -> Result<()> {
        self.sum = Some(match self.sum {
            None => v,
            Some(s) => s.add(&v)?,
        });
        Ok(())
    }

    fn mean(self, tape: &'t Tape, count: f64) -> Var<'t> {
        match self.sum {
            Some(s) if count > 0.0 => s.scale(1.0 / count),
            _ => tape.scalar(0.0),
        }
    }
}

/// Record every loss part for `batch` with the networks bound in `bound`
/// (one entry per model network).
pub fn assemble_loss<'t>(
    model: &Model,
    batch: &Batch,
    weights: &TermWeights,
    tape: &'t Tape,
    bound: &[BoundParams<'t>],
) -> Result<LossVars<'t>> {
    let d = batch.dim;
    let dt = batch.dt;
    let k = batch.paths as f64;
    let union = batch.blocks.len() as f64;
    let tcol = tape.constant(Array::column(batch.t.clone()));
    let x = tape.constant(batch.x.clone());
    let ones = tape.constant(Array::filled(d, 1, 1.0));
    let rowsum = |a: Var<'t>| a.matmul(&ones);

    let velocity = match model.velocity {
        Some(i) => {
            let y = model.networks[i].forward(&bound[i], tcol, x)?;
            let mut grads = Vec::with_capacity(d + 1);
            for c in 0..=d {
                grads.push(tape.grad_graph(&y.col(c)?.sum(), &[x])?[0]);
            }
            Some((y, grads))
        }
        None => None,
    };
    // Phase-network gradients: separate ∇φ, ∇μ when the velocity needs ∇μ;
    // otherwise one pass giving each row the gradient of its own rotated
    // channel.
    enum PhaseGrads<'t> {
        Split(Var<'t>, Var<'t>),
        Rotated(Var<'t>),
    }
    let diag = model.diag;
    let phase = match model.phase {
        Some(i) => {
            let y = model.networks[i].forward(&bound[i], tcol, x)?;
            let grads = if velocity.is_some() {
                let g_phi = tape.grad_graph(&y.col(0)?.sum(), &[x])?[0];
                let g_mu = tape.grad_graph(&y.col(1)?.sum(), &[x])?[0];
                PhaseGrads::Split(g_phi, g_mu)
            } else {
                let r = diag.expect("phase problem").r_inv;
                let mut w = Array::zeros(batch.rows(), 2);
                for b in &batch.blocks {
                    let row = if b.channel == Channel::PhaseHat { 0 } else { 1 };
                    for rr in b.offset..b.offset + b.len {
                        w.set(rr, 0, r[row][0]);
                        w.set(rr, 1, r[row][1]);
                    }
                }
                let wv = tape.constant(w);
                PhaseGrads::Rotated(tape.grad_graph(&y.mul(&wv)?.sum(), &[x])?[0])
            };
            Some((y, grads))
        }
        None => None,
    };

    let coupling = model.problem.kind.coupling();
    let mut residual = Acc::new();
    let mut terminal = Acc::new();
    let mut terminal_phase = Acc::new();
    for b in &batch.blocks {
        let dw = tape.constant(b.dw.clone());
        let corr = tape.constant(b.correction.clone());
        let has_steps = !b.from.is_empty();
        match b.channel {
            Channel::Velocity => {
                let (y, g) = velocity.as_ref().expect("velocity network");
                let yb = y.select(b.offset, b.len, 0, d)?;
                let gp = g[d].row_block(b.offset, b.len)?;
                let force = tape.constant(b.force.clone().expect("velocity forcing"));
                let capillary = match &phase {
                    Some((yp, PhaseGrads::Split(_, g_mu))) if coupling != 0.0 => {
                        Some((yp.select(b.offset, b.len, 0, 1)?, g_mu.row_block(b.offset, b.len)?))
                    }
                    _ => None,
                };
                if has_steps {
                    for i in 0..d {
                        let zi = g[i].row_block(b.offset, b.len)?;
                        let mut drift = force.col(i)?.add(&gp.col(i)?)?.add(&rowsum(zi.mul(&yb)?)?)?;
                        if let Some((phi, g_mu)) = &capillary {
                            drift = drift.add(&phi.mul(&g_mu.col(i)?)?.scale(coupling))?;
                        }
                        let noise = rowsum(zi.mul(&dw)?)?.scale(b.sigma);
                        let yi = yb.col(i)?;
                        let target = euler_target(&yi, &drift, &noise, dt, &corr.col(i)?);
                        let r = target.gather(b.from.clone())?.sub(&yi.gather(b.to.clone())?)?;
                        residual.push(r.square().sum())?;
                    }
                }
            }
            Channel::PhaseHat | Channel::PotentialHat => {
                let (y, grads) = phase.as_ref().expect("phase network");
                let ch = model.problem.kind.ch().expect("phase problem");
                let diag = diag.expect("phase problem");
                let row = if b.channel == Channel::PhaseHat { 0 } else { 1 };
                let r = diag.r_inv[row];
                let phi = y.select(b.offset, b.len, 0, 1)?;
                let mu = y.select(b.offset, b.len, 1, 1)?;
                let y_hat = phi.scale(r[0]).add(&mu.scale(r[1]))?;
                if has_steps {
                    let (z_hat, convection) = match grads {
                        PhaseGrads::Rotated(g) => (g.row_block(b.offset, b.len)?, None),
                        PhaseGrads::Split(g_phi, g_mu) => {
                            let gp = g_phi.row_block(b.offset, b.len)?;
                            let z = gp.scale(r[0]).add(&g_mu.row_block(b.offset, b.len)?.scale(r[1]))?;
                            let conv = match &velocity {
                                Some((yv, _)) => Some(rowsum(yv.select(b.offset, b.len, 0, d)?.mul(&gp)?)?),
                                None => None,
                            };
                            (z, conv)
                        }
                    };
                    let source = tape.constant(b.source.clone().expect("phase source"));
                    let convection = match convection {
                        Some(c) => c,
                        None => tape.scalar(0.0).broadcast(b.len, 1)?,
                    };
                    let (f1, f2) = ch_driver_hat(&phi, &mu, &convection, &source, ch, &diag);
                    let f_hat = if row == 0 { f1 } else { f2 };
                    let noise = rowsum(z_hat.mul(&dw)?)?.scale(b.sigma);
                    let target = euler_target(&y_hat, &f_hat, &noise, dt, &corr);
                    let res = target.gather(b.from.clone())?.sub(&y_hat.gather(b.to.clone())?)?;
                    residual.push(res.square().sum())?;
                }
            }
        }
        if let (Some((y, _)), Some((data, mask))) = (&velocity, &b.end_velocity) {
            let ends = y.select(b.offset, b.len, 0, d)?.gather(b.ends.clone())?;
            let diff = ends.sub(&tape.constant(data.clone()))?.mul(&tape.constant(mask.clone()))?;
            terminal.push(diff.square().sum())?;
        }
        if let (Some((y, _)), Some(data)) = (&phase, &b.end_phase) {
            let ends = y.select(b.offset, b.len, 0, 1)?.gather(b.ends.clone())?;
            let diff = ends.sub(&tape.constant(data.clone()))?;
            terminal_phase.push(diff.square().sum())?;
        }
    }
    let residual = residual.mean(tape, k * batch.steps as f64);
    let terminal = terminal.mean(tape, k * union);
    let terminal_phase = terminal_phase.mean(tape, k * union);

    let mut divergence = Acc::new();
    let mut extra = Acc::new();
    if let Some((y, g)) = &velocity {
        if weights.0[3] != 0.0 {
            let mut div = g[0].select(0, batch.main_rows, 0, 1)?;
            for (i, gi) in g.iter().enumerate().take(d).skip(1) {
                div = div.add(&gi.select(0, batch.main_rows, i, 1)?)?;
            }
            divergence.push(div.square().sum())?;
        }
        let levels = (batch.steps + 1) as f64;
        for a in &batch.aux {
            let count = batch.aux_points as f64 * levels;
            let term = match a.kind {
                AuxKind::Lid => y.select(a.offset, a.len, 0, 1)?.shift(1.0).square().sum(),
                AuxKind::Inlet => {
                    let u_in = match model.problem.data {
                        ProblemData::Obstacle { u_in } => u_in,
                        _ => 0.0,
                    };
                    y.select(a.offset, a.len, 0, 1)?.shift(u_in).square().sum()
                }
                AuxKind::Outflow => {
                    // Outward normal e₁: (P n + ν Z·n)_i = P δ_i1 + ν ∂Y_i/∂x₁.
                    let nu = model.problem.kind.ns().expect("velocity problem").nu;
                    let pressure = y.select(a.offset, a.len, d, 1)?;
                    let mut acc = pressure.add(&g[0].select(a.offset, a.len, 0, 1)?.scale(nu))?.square().sum();
                    for gi in g.iter().take(d).skip(1) {
                        acc = acc.add(&gi.select(a.offset, a.len, 0, 1)?.scale(nu).square().sum())?;
                    }
                    acc
                }
            };
            extra.push(term.scale(1.0 / count))?;
        }
    }
    let divergence = divergence.mean(tape, k * (batch.steps + 1) as f64 * union);
    let boundary_extra = extra.mean(tape, 1.0);

    let mut mass = Acc::new();
    if let (Some(m), Some(i)) = (&batch.mass, model.phase) {
        let tm = tape.constant(Array::column(m.t.clone()));
        let xm = tape.constant(m.x.clone());
        let y = model.networks[i].forward(&bound[i], tm, xm)?;
        for l in 0..m.levels {
            let integral = y.select(l * m.points, m.points, 0, 1)?.sum().scale(m.volume / m.points as f64);
            mass.push(integral.shift(-m.target).square())?;
        }
    }
    let mass_levels = batch.mass.as_ref().map_or(0, |m| m.levels) as f64;
    let mass = mass.mean(tape, mass_levels);

    let parts = [residual, terminal, terminal_phase, divergence, boundary_extra, mass];
    let mut total = tape.scalar(0.0);
    for (p, w) in parts.iter().zip(&weights.0) {
        if *w != 0.0 {
            total = total.add(&p.scale(*w))?;
        }
    }
    Ok(LossVars {
        residual,
        terminal,
        terminal_phase,
        divergence,
        boundary_extra,
        mass,
        total,
    })
}

/// Loss value and parameter gradient (flattened over all networks) of a
/// model on a fixed batch.
pub fn loss_and_gradient(model: &Model, batch: &Batch, weights: &TermWeights) -> Result<(LossBreakdown, Vec<f64>)> {
    let tape = Tape::new();
    let bound: Vec<BoundParams<'_>> = model.networks.iter().map(|n| n.params.bind(&tape, true)).collect();
    let loss = assemble_loss(model, batch, weights, &tape, &bound)?;
    let breakdown = loss.breakdown();
    let grads = tape.gradients(&loss.total)?;
    let mut flat = Vec::with_capacity(model.num_params());
    for b in &bound {
        for v in b.vars() {
            flat.extend_from_slice(grads.wrt(&v).data());
        }
    }
    Ok((breakdown, flat))
}

/// Loss value only.
pub fn loss_value(model: &Model, batch: &Batch, weights: &TermWeights) -> Result<LossBreakdown> {
    let tape = Tape::new();
    let bound: Vec<BoundParams<'_>> = model.networks.iter().map(|n| n.params.bind(&tape, false)).collect();
    Ok(assemble_loss(model, batch, weights, &tape, &bound)?.breakdown())
}

/// Errors of the network at `t = 0` against the exact backward solution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub components: Vec<String>,
    pub errors: Vec<RelativeErrors>,
    /// Velocity measured with the pointwise Euclidean norm.
    pub velocity: Option<RelativeErrors>,
    pub grad_p: Option<RelativeErrors>,
}

pub fn component_names(model: &Model) -> Vec<String> {
    let mut out = Vec::new();
    if model.velocity.is_some() {
        out.extend((1..=model.problem.kind.dim()).map(|i| format!("u{i}")));
    }
    if model.phase.is_some() {
        out.push("phi".into());
    }
    out
}

/// Fixed test points, drawn independently of any training seed.
pub fn test_points(problem: &Problem, count: usize) -> Result<Array> {
    problem.domain.sample(count, mix_seed(&[0x7E57, count as u64]))
}

pub fn evaluate(model: &Model, points: &Array) -> Result<Option<Evaluation>> {
    let Some(exact) = model.problem.data.exact() else {
        return Ok(None);
    };
    let d = model.problem.kind.dim();
    let n = points.rows();
    let mut components = Vec::new();
    let mut errors = Vec::new();
    let mut velocity = None;
    let mut grad_p = None;
    if let Some(net) = model.velocity_net() {
        let tape = Tape::new();
        let bound = net.params.bind(&tape, false);
        let tv = tape.constant(Array::zeros(n, 1));
        let xv = tape.var(points.clone());
        let y = net.forward(&bound, tv, xv)?;
        let gp = tape.grad_wrt(&y.col(d)?.sum(), &[xv])?.remove(0);
        let yv = y.value();
        let mut num_u = Vec::with_capacity(n);
        let mut ex_u = Vec::with_capacity(n);
        let mut num_gp = Vec::with_capacity(n);
        let mut ex_gp = Vec::with_capacity(n);
        for r in 0..n {
            let x = points.row_slice(r);
            num_u.push(yv.row_slice(r)[..d].to_vec());
            ex_u.push(exact.velocity(&0.0, x).expect("velocity"));
            num_gp.push(gp.row_slice(r).to_vec());
            ex_gp.push(exact.pressure_gradient(&0.0, x).expect("pressure gradient"));
        }
        for i in 0..d {
            let a: Vec<f64> = num_u.iter().map(|v| v[i]).collect();
            let e: Vec<f64> = ex_u.iter().map(|v| v[i]).collect();
            components.push(format!("u{}", i + 1));
            errors.push(relative_errors(&a, &e));
        }
        velocity = Some(relative_errors_vector(&num_u, &ex_u));
        grad_p = Some(relative_errors_vector(&num_gp, &ex_gp));
    }
    if let Some(net) = model.phase_net() {
        let y = net.evaluate(&vec![0.0; n], points)?;
        let a = y.column_values(0);
        let e: Vec<f64> = (0..n).map(|r| exact.phase(&0.0, points.row_slice(r)).expect("phase")).collect();
        components.push("phi".into());
        errors.push(relative_errors(&a, &e));
    }
    Ok(Some(Evaluation {
        components,
        errors,
        velocity,
        grad_p,
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Relative L² test error per component, when evaluated.
    pub test_rel_l2: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub components: Vec<String>,
    pub history: Vec<HistoryRow>,
    pub seconds: f64,
}

/// State of a failed iteration.
#[derive(Clone, Debug, Serialize)]
pub struct DivergenceSnapshot {
    pub iteration: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

/// Train all networks of `model` in place.
pub fn train(
    model: &mut Model,
    schedule: &TrainSchedule,
    weights: &LossWeights,
    seed: u64,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    weights.validate()?;
    let term_weights = TermWeights::for_problem(&model.problem, weights);
    let total = schedule.total_iterations();
    let mass = if term_weights.0[5] != 0.0 {
        Some(MassQuadrature::new(&model.problem, opts.mass_points, mix_seed(&[seed, 0x3A55]))?)
    } else {
        None
    };
    let test = if opts.eval_every > 0 && model.problem.data.exact().is_some() {
        Some(test_points(&model.problem, opts.eval_points)?)
    } else {
        None
    };
    let components = component_names(model);
    let ends = schedule.segment_ends();
    let curriculum_end = opts
        .curriculum
        .map_or(0, |f| (f.clamp(0.0, 1.0) * total as f64).round() as usize);
    let mut adam = Adam::new(model.num_params(), schedule.adam);
    let mut params = model.flat_params();
    let mut history = Vec::with_capacity(total);
    let started = Instant::now();
    for iter in 0..total {
        let lr = schedule.lr_at(iter);
        let start = if iter < curriculum_end { model.grid.steps() / 2 } else { 0 };
        let batch = build_batch(
            model,
            schedule.batch,
            start,
            mix_seed(&[seed, iter as u64, 0x17E4]),
            opts,
            mass.as_ref(),
        )?;
        let (loss, grads) = loss_and_gradient(model, &batch, &term_weights)?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let snap = DivergenceSnapshot { iteration: iter, lr, loss };
            let text = serde_json::to_string(&snap)?;
            if let Some(dir) = &opts.checkpoint_dir {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("divergence_snapshot.json"), &text)?;
            }
            return Err(Error::NonFinite(text));
        }
        let test_rel_l2 = match &test {
            Some(pts) if iter % opts.eval_every == 0 || iter + 1 == total => {
                evaluate(model, pts)?.map(|e| e.errors.iter().map(|r| r.l2).collect())
            }
            _ => None,
        };
        history.push(HistoryRow {
            iteration: iter,
            lr,
            loss,
            test_rel_l2,
        });
        adam.step(&mut params, &grads, lr)?;
        model.set_flat_params(&params)?;
        if let Some(dir) = &opts.checkpoint_dir {
            if let Some(seg) = ends.iter().position(|&e| e == iter + 1) {
                std::fs::create_dir_all(dir)?;
                let meta = serde_json::json!({
                    "iteration": iter + 1,
                    "segment": seg,
                    "seed": seed,
                    "problem": model.problem,
                });
                Checkpoint::new(model.networks.clone(), meta).save(&dir.join(format!("checkpoint_segment{}.json", seg + 1)))?;
            }
        }
    }
    Ok(TrainOutcome {
        components,
        history,
        seconds: started.elapsed().as_secs_f64(),
    })
}

/// Loss history as CSV.
pub fn write_history_csv(mut out: impl Write, outcome: &TrainOutcome) -> Result<()> {
    let mut header =
        String::from("iteration,lr,total,residual,terminal,terminal_phase,divergence,boundary_extra,mass");
    for c in &outcome.components {
        header.push_str(&format!(",test_rel_l2_{c}"));
    }
    writeln!(out, "{header}")?;
    for row in &outcome.history {
        let l = &row.loss;
        let mut line = format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            row.iteration, row.lr, l.total, l.residual, l.terminal, l.terminal_phase, l.divergence, l.boundary_extra, l.mass
        );
        for i in 0..outcome.components.len() {
            match &row.test_rel_l2 {
                Some(v) => line.push_str(&format!(",{:e}", v[i])),
                None => line.push(','),
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}
