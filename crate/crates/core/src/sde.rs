//! Initial-point sampling, Brownian increments, Euler–Maruyama paths and the
//! stopping (Dirichlet) and reflecting (Neumann) boundary mechanisms.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::error::{Error, Result};

/// Uniform grid `t_n = n T / N` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) || steps == 0 {
            return Err(Error::Configuration(format!(
                "time grid needs T > 0 and N >= 1, got T = {horizon}, N = {steps}"
            )));
        }
        let g = Self { horizon, steps };
        let back = g.dt() * steps as f64;
        if (back - horizon).abs() > 4.0 * f64::EPSILON * horizon {
            return Err(Error::Configuration(format!(
                "N = {steps} does not divide T = {horizon}"
            )));
        }
        Ok(g)
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.steps {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }
}

/// SplitMix64 finalizer chained over `parts`; used to derive independent
/// generator seeds from structured keys.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Deterministic generator keyed by a tuple of integers.
pub fn rng_for(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix_seed(parts))
}

/// Latin hypercube sample of `k` points in the box `[lo, hi]`: along every
/// axis each of the `k` equal strata holds exactly one point.
pub fn lhs_sample(k: usize, lo: &[f64], hi: &[f64], seed: u64) -> Result<Array> {
    check_box(lo, hi)?;
    if k == 0 {
        return Err(Error::Configuration("LHS needs at least one point".into()));
    }
    let d = lo.len();
    let mut rng = rng_for(&[seed, 0x1A5]);
    let mut out = Array::zeros(k, d);
    let mut perm: Vec<usize> = (0..k).collect();
    for i in 0..d {
        perm.shuffle(&mut rng);
        for (row, &stratum) in perm.iter().enumerate() {
            let u: f64 = rng.random();
            let v = lo[i] + (stratum as f64 + u) / k as f64 * (hi[i] - lo[i]);
            out.set(row, i, v.min(hi[i]));
        }
    }
    Ok(out)
}

fn check_box(lo: &[f64], hi: &[f64]) -> Result<()> {
    if lo.is_empty() || lo.len() != hi.len() {
        return Err(Error::Configuration("box bounds must have equal nonzero length".into()));
    }
    if lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
        return Err(Error::Configuration(format!("degenerate box {lo:?}..{hi:?}")));
    }
    Ok(())
}

/// Spatial domain of a forward process.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Geometry {
    Whole { dim: usize },
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    /// Box with a closed disk (ball) removed from its interior.
    BoxMinusDisk {
        lo: Vec<f64>,
        hi: Vec<f64>,
        center: Vec<f64>,
        radius: f64,
    },
}

/// First point where a segment reaches the boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct Crossing {
    /// Segment parameter in `[0, 1]`.
    pub s: f64,
    pub point: Vec<f64>,
    /// Boundary part: box faces are `2i` (lower) and `2i + 1` (upper) for
    /// axis `i`; a ball boundary is part 0; the removed disk of
    /// [`Geometry::BoxMinusDisk`] is part `2d`.
    pub part: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Parameters where the segment `a + s (b − a)` meets the sphere `|x − c| = r`.
fn sphere_roots(a: &[f64], b: &[f64], c: &[f64], r: f64) -> Option<(f64, f64)> {
    let dir: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
    let ac: Vec<f64> = a.iter().zip(c).map(|(x, y)| x - y).collect();
    let qa = dot(&dir, &dir);
    if qa == 0.0 {
        return None;
    }
    let qb = dot(&ac, &dir);
    let qc = dot(&ac, &ac) - r * r;
    let disc = qb * qb - qa * qc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    Some(((-qb - sq) / qa, (-qb + sq) / qa))
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        match self {
            Geometry::Whole { dim } if *dim == 0 => {
                Err(Error::Configuration("dimension must be positive".into()))
            }
            Geometry::Whole { .. } => Ok(()),
            Geometry::Box { lo, hi } => check_box(lo, hi),
            Geometry::Ball { center, radius } => {
                if center.is_empty() || !(*radius > 0.0) {
                    Err(Error::Configuration("ball needs a center and positive radius".into()))
                } else {
                    Ok(())
                }
            }
            Geometry::BoxMinusDisk {
                lo,
                hi,
                center,
                radius,
            } => {
                check_box(lo, hi)?;
                if center.len() != lo.len() || !(*radius > 0.0) {
                    return Err(Error::Configuration("removed disk is malformed".into()));
                }
                let inside = center
                    .iter()
                    .zip(lo.iter().zip(hi))
                    .all(|(c, (l, h))| c - radius > *l && c + radius < *h);
                if !inside {
                    return Err(Error::Configuration(
                        "removed disk must lie inside the box".into(),
                    ));
                }
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Geometry::Whole { dim } => *dim,
            Geometry::Box { lo, .. } | Geometry::BoxMinusDisk { lo, .. } => lo.len(),
            Geometry::Ball { center, .. } => center.len(),
        }
    }

    pub fn is_bounded(&self) -> bool {
        !matches!(self, Geometry::Whole { .. })
    }

    pub fn part_count(&self) -> usize {
        match self {
            Geometry::Whole { .. } => 0,
            Geometry::Box { lo, .. } => 2 * lo.len(),
            Geometry::Ball { .. } => 1,
            Geometry::BoxMinusDisk { lo, .. } => 2 * lo.len() + 1,
        }
    }

    /// Strict interior.
    pub fn interior(&self, x: &[f64]) -> bool {
        match self {
            Geometry::Whole { .. } => true,
            Geometry::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l < v && v < h),
            Geometry::Ball { center, radius } => dist2(x, center) < radius * radius,
            Geometry::BoxMinusDisk {
                lo,
                hi,
                center,
                radius,
            } => {
                x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l < v && v < h)
                    && dist2(x, center) > radius * radius
            }
        }
    }

    /// Closed domain (interior plus boundary).
    pub fn contains(&self, x: &[f64]) -> bool {
        match self {
            Geometry::Whole { .. } => true,
            Geometry::Box { lo, hi } => x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l <= v && v <= h),
            Geometry::Ball { center, radius } => dist2(x, center) <= radius * radius,
            Geometry::BoxMinusDisk {
                lo,
                hi,
                center,
                radius,
            } => {
                x.iter().zip(lo.iter().zip(hi)).all(|(v, (l, h))| l <= v && v <= h)
                    && dist2(x, center) >= radius * radius
            }
        }
    }

    /// Distance from a point of the closed domain to the boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        let box_dist = |lo: &[f64], hi: &[f64]| {
            x.iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (l, h))| (v - l).abs().min((h - v).abs()))
                .fold(f64::INFINITY, f64::min)
        };
        match self {
            Geometry::Whole { .. } => f64::INFINITY,
            Geometry::Box { lo, hi } => box_dist(lo, hi),
            Geometry::Ball { center, radius } => (dist2(x, center).sqrt() - radius).abs(),
            Geometry::BoxMinusDisk {
                lo,
                hi,
                center,
                radius,
            } => box_dist(lo, hi).min((dist2(x, center).sqrt() - radius).abs()),
        }
    }

    /// Lebesgue measure of the domain (infinite for the whole space).
    pub fn volume(&self) -> f64 {
        let ball = |d: usize, r: f64| {
            // V_d = V_{d-2} 2π/d, V_0 = 1, V_1 = 2.
            let mut v = if d % 2 == 0 { 1.0 } else { 2.0 };
            let mut k = if d % 2 == 0 { 2 } else { 3 };
            while k <= d {
                v *= 2.0 * std::f64::consts::PI / k as f64;
                k += 2;
            }
            v * r.powi(d as i32)
        };
        match self {
            Geometry::Whole { .. } => f64::INFINITY,
            Geometry::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).product(),
            Geometry::Ball { center, radius } => ball(center.len(), *radius),
            Geometry::BoxMinusDisk { lo, hi, radius, .. } => {
                lo.iter().zip(hi).map(|(a, b)| b - a).product::<f64>() - ball(lo.len(), *radius)
            }
        }
    }

    pub fn on_boundary(&self, x: &[f64], tol: f64) -> bool {
        self.is_bounded() && self.boundary_distance(x) <= tol
    }

    /// Outward unit normal of the domain on boundary part `part` at `x`.
    pub fn normal(&self, part: usize, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let radial = |c: &[f64], sign: f64| {
            let r = dist2(x, c).sqrt();
            x.iter().zip(c).map(|(v, ci)| sign * (v - ci) / r).collect()
        };
        match self {
            Geometry::Ball { center, .. } => radial(center, 1.0),
            Geometry::BoxMinusDisk { center, .. } if part == 2 * d => radial(center, -1.0),
            _ => {
                let mut n = vec![0.0; d];
                n[part / 2] = if part % 2 == 0 { -1.0 } else { 1.0 };
                n
            }
        }
    }

    /// First boundary point on the segment from `a` (in the closed domain)
    /// to `b`, if any. A segment ending exactly on the boundary crosses at
    /// `s = 1`.
    pub fn first_crossing(&self, a: &[f64], b: &[f64]) -> Option<Crossing> {
        let mut best: Option<(f64, usize)> = None;
        let mut consider = |s: f64, part: usize| {
            if (0.0..=1.0).contains(&s) && best.is_none_or(|(bs, _)| s < bs) {
                best = Some((s, part));
            }
        };
        let faces = |lo: &[f64], hi: &[f64], consider: &mut dyn FnMut(f64, usize)| {
            for i in 0..lo.len() {
                let step = b[i] - a[i];
                if b[i] <= lo[i] && step < 0.0 {
                    consider((lo[i] - a[i]) / step, 2 * i);
                }
                if b[i] >= hi[i] && step > 0.0 {
                    consider((hi[i] - a[i]) / step, 2 * i + 1);
                }
            }
        };
        match self {
            Geometry::Whole { .. } => return None,
            Geometry::Box { lo, hi } => faces(lo, hi, &mut consider),
            Geometry::Ball { center, radius } => {
                if dist2(b, center) >= radius * radius {
                    if let Some((_, s)) = sphere_roots(a, b, center, *radius) {
                        consider(s.clamp(0.0, 1.0), 0);
                    }
                }
            }
            Geometry::BoxMinusDisk {
                lo,
                hi,
                center,
                radius,
            } => {
                faces(lo, hi, &mut consider);
                if let Some((s, _)) = sphere_roots(a, b, center, *radius) {
                    let dir: Vec<f64> = b.iter().zip(a).map(|(x, y)| x - y).collect();
                    let ac: Vec<f64> = a.iter().zip(center.iter()).map(|(x, y)| x - y).collect();
                    if dot(&dir, &ac) < 0.0 {
                        consider(s.max(0.0), 2 * lo.len());
                    }
                }
            }
        }
        let (s, part) = best?;
        let mut point: Vec<f64> = if s == 1.0 {
            b.to_vec()
        } else {
            a.iter().zip(b).map(|(x, y)| x + s * (y - x)).collect()
        };
        if let Geometry::Box { lo, hi } | Geometry::BoxMinusDisk { lo, hi, .. } = self {
            if part < 2 * lo.len() {
                point[part / 2] = if part % 2 == 0 { lo[part / 2] } else { hi[part / 2] };
            }
        }
        Some(Crossing { s, point, part })
    }

    /// Mirror `x` across the tangent plane of boundary part `part` at `p`.
    pub fn mirror(&self, part: usize, p: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let curved = matches!(self, Geometry::Ball { .. })
            || matches!(self, Geometry::BoxMinusDisk { .. } if part == 2 * d);
        if curved {
            let n = self.normal(part, p);
            let off: f64 = x.iter().zip(p).zip(&n).map(|((xi, pi), ni)| (xi - pi) * ni).sum();
            x.iter().zip(&n).map(|(xi, ni)| xi - 2.0 * off * ni).collect()
        } else {
            let mut out = x.to_vec();
            let i = part / 2;
            out[i] = 2.0 * p[i] - x[i];
            out
        }
    }

    /// Interior sample: Latin hypercube for boxes, radially stratified for
    /// balls, and Latin hypercube with uniform redraws of rejected points for
    /// a box minus a disk.
    pub fn sample(&self, k: usize, seed: u64) -> Result<Array> {
        self.validate()?;
        match self {
            Geometry::Whole { .. } => Err(Error::Configuration(
                "cannot sample an unbounded domain; give a sampling box".into(),
            )),
            Geometry::Box { lo, hi } => lhs_sample(k, lo, hi, seed),
            Geometry::Ball { center, radius } => {
                let d = center.len();
                let mut rng = rng_for(&[seed, 0xBA11]);
                let mut strata: Vec<usize> = (0..k).collect();
                strata.shuffle(&mut rng);
                let mut out = Array::zeros(k, d);
                for (row, &s) in strata.iter().enumerate() {
                    let u = (s as f64 + rng.random::<f64>()) / k as f64;
                    let r = radius * u.powf(1.0 / d as f64);
                    let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let norm = dot(&dir, &dir).sqrt().max(f64::MIN_POSITIVE);
                    for i in 0..d {
                        out.set(row, i, center[i] + r * dir[i] / norm);
                    }
                }
                Ok(out)
            }
            Geometry::BoxMinusDisk { lo, hi, .. } => {
                let mut out = lhs_sample(k, lo, hi, seed)?;
                let mut rng = rng_for(&[seed, 0xD15C]);
                for row in 0..k {
                    while !self.interior(out.row_slice(row)) {
                        for i in 0..lo.len() {
                            out.set(row, i, rng.random_range(lo[i]..hi[i]));
                        }
                    }
                }
                Ok(out)
            }
        }
    }
}

/// Points on the box face `x_axis = value` with Latin hypercube spread over
/// the remaining coordinates of `[lo, hi]`.
pub fn lhs_on_face(k: usize, lo: &[f64], hi: &[f64], axis: usize, value: f64, seed: u64) -> Result<Array> {
    check_box(lo, hi)?;
    let mut pts = lhs_sample(k, lo, hi, seed)?;
    for r in 0..k {
        pts.set(r, axis, value);
    }
    Ok(pts)
}

/// Gaussian increments `ΔW ~ N(0, dt I)` for every channel, path, step and
/// coordinate. Each `(seed, channel, path)` has its own generator, so a
/// path's increments do not depend on how many other paths are drawn.
#[derive(Clone, Debug)]
pub struct BrownianBatch {
    paths: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    seed: u64,
    data: Vec<Vec<f64>>,
}

pub fn brownian_batch(paths: usize, steps: usize, dim: usize, channels: usize, dt: f64, seed: u64) -> Result<BrownianBatch> {
    if paths == 0 || steps == 0 || dim == 0 || channels == 0 {
        return Err(Error::Configuration("Brownian batch counts must be positive".into()));
    }
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::Configuration(format!("time step must be positive, got {dt}")));
    }
    let sd = dt.sqrt();
    let data = (0..channels)
        .map(|c| {
            let mut v = Vec::with_capacity(paths * steps * dim);
            for k in 0..paths {
                let mut rng = rng_for(&[seed, c as u64, k as u64]);
                for _ in 0..steps * dim {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    v.push(sd * z);
                }
            }
            v
        })
        .collect();
    Ok(BrownianBatch {
        paths,
        steps,
        dim,
        dt,
        seed,
        data,
    })
}

impl BrownianBatch {
    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn channels(&self) -> usize {
        self.data.len()
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn increment(&self, channel: usize, path: usize, step: usize) -> &[f64] {
        let o = (path * self.steps + step) * self.dim;
        &self.data[channel][o..o + self.dim]
    }

    /// All increments of one channel, ordered by path, step, coordinate.
    pub fn channel(&self, channel: usize) -> &[f64] {
        &self.data[channel]
    }

    /// Batch with every increment replaced by zero.
    pub fn zeroed(&self) -> Self {
        let mut b = self.clone();
        for c in &mut b.data {
            c.iter_mut().for_each(|v| *v = 0.0);
        }
        b
    }

    /// Build from explicit increments (one vector per channel).
    pub fn from_increments(paths: usize, steps: usize, dim: usize, dt: f64, data: Vec<Vec<f64>>) -> Result<Self> {
        if data.iter().any(|c| c.len() != paths * steps * dim) {
            return Err(Error::Configuration("increment data has the wrong length".into()));
        }
        Ok(Self {
            paths,
            steps,
            dim,
            dt,
            seed: 0,
            data,
        })
    }
}

/// Boundary treatment of one part of the boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartMode {
    /// Stop the path at its first exit (Dirichlet data).
    Stop,
    /// Mirror the path back inside (Neumann data).
    Reflect,
}

/// How paths interact with the domain boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryMode {
    /// Paths ignore the boundary (whole space or periodic problems).
    Free,
    Dirichlet,
    Neumann,
    /// One mode per boundary part, indexed as in [`Crossing::part`].
    Mixed(Vec<PartMode>),
}

impl BoundaryMode {
    pub fn part(&self, part: usize) -> PartMode {
        match self {
            BoundaryMode::Free | BoundaryMode::Dirichlet => PartMode::Stop,
            BoundaryMode::Neumann => PartMode::Reflect,
            BoundaryMode::Mixed(m) => m.get(part).copied().unwrap_or(PartMode::Stop),
        }
    }
}

/// Result of [`dirichlet_exit`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExitStep {
    /// Stored next state (the exit point when exited).
    pub state: Vec<f64>,
    /// Increment satisfying `state = x_n + √(2 coef) increment` exactly.
    pub increment: Vec<f64>,
    pub exited: bool,
    pub exit_point: Option<Vec<f64>>,
    pub part: Option<usize>,
}

/// Stop a step at the boundary: if `x_next` is not in the open domain, it is
/// replaced by the first boundary point of the segment `[x_n, x_next]` and
/// the increment is recomputed from the shortened step.
pub fn dirichlet_exit(geometry: &Geometry, x_n: &[f64], x_next: &[f64], coef: f64) -> Result<ExitStep> {
    check_coef(coef)?;
    if !geometry.interior(x_n) {
        return Err(Error::Usage(format!("{x_n:?} is not inside the domain")));
    }
    let sigma = (2.0 * coef).sqrt();
    if geometry.interior(x_next) {
        return Ok(ExitStep {
            state: x_next.to_vec(),
            increment: x_next.iter().zip(x_n).map(|(b, a)| (b - a) / sigma).collect(),
            exited: false,
            exit_point: None,
            part: None,
        });
    }
    let c = geometry
        .first_crossing(x_n, x_next)
        .ok_or_else(|| Error::Domain("no boundary crossing found for an exiting step".into()))?;
    let (state, increment) = repaired(x_n, &c.point, sigma);
    Ok(ExitStep {
        state,
        increment,
        exited: true,
        exit_point: Some(c.point),
        part: Some(c.part),
    })
}

fn repaired(x_n: &[f64], target: &[f64], sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let inc: Vec<f64> = target.iter().zip(x_n).map(|(p, a)| (p - a) / sigma).collect();
    let state = x_n.iter().zip(&inc).map(|(a, w)| a + sigma * w).collect();
    (state, inc)
}

fn check_coef(coef: f64) -> Result<()> {
    if coef > 0.0 && coef.is_finite() {
        Ok(())
    } else {
        Err(Error::Configuration(format!("diffusion coefficient must be positive, got {coef}")))
    }
}

/// Maximum number of sequential mirror passes before a step is redrawn.
pub const MAX_REFLECTIONS: usize = 4;

/// Outcome of reflecting one candidate state.
#[derive(Clone, Debug, PartialEq)]
pub enum Reflected {
    /// Candidate already in the closed domain.
    Inside,
    Mirrored {
        /// `X′`, inside the closed domain.
        inside: Vec<f64>,
        /// `X″`, where the segment `[X, X′]` meets the boundary.
        foot: Vec<f64>,
        /// Boundary part containing `foot`.
        part: usize,
        /// `|X − X′|`.
        distance: f64,
    },
    /// The path hit a stopping part of the boundary.
    Stopped { point: Vec<f64>, part: usize },
    /// Overshoot not resolved within [`MAX_REFLECTIONS`] passes.
    Failed,
}

/// Mirror `x` (reached from `x_prev`) back into the domain, part by part in
/// crossing order. Parts whose mode is [`PartMode::Stop`] end the path.
pub fn reflect(geometry: &Geometry, mode: &BoundaryMode, x_prev: &[f64], x: &[f64]) -> Reflected {
    let mut start = x_prev.to_vec();
    let mut cur = x.to_vec();
    let mut mirrored = false;
    for _ in 0..=MAX_REFLECTIONS {
        let Some(c) = geometry.first_crossing(&start, &cur) else {
            return finish(geometry, x, cur, mirrored);
        };
        match mode.part(c.part) {
            PartMode::Stop => {
                return Reflected::Stopped {
                    point: c.point,
                    part: c.part,
                }
            }
            PartMode::Reflect => {
                if c.s == 1.0 && geometry.contains(&cur) {
                    return finish(geometry, x, cur, mirrored);
                }
                cur = geometry.mirror(c.part, &c.point, &cur);
                start = c.point;
                mirrored = true;
            }
        }
    }
    Reflected::Failed
}

fn finish(geometry: &Geometry, raw: &[f64], inside: Vec<f64>, mirrored: bool) -> Reflected {
    if !mirrored {
        return Reflected::Inside;
    }
    if !geometry.contains(&inside) {
        return Reflected::Failed;
    }
    let (foot, part) = match geometry.first_crossing(&inside, raw) {
        Some(c) => (c.point, c.part),
        None => return Reflected::Failed,
    };
    let distance = dist2(raw, &inside).sqrt();
    Reflected::Mirrored {
        inside,
        foot,
        part,
        distance,
    }
}

/// Neumann treatment of one candidate state: returns `X′` and the backward
/// correction `ΔY = q(t, X″) |ΔX|` (zero when no reflection was needed).
pub fn neumann_reflect(
    geometry: &Geometry,
    x_prev: &[f64],
    x: &[f64],
    t: f64,
    q: impl Fn(f64, &[f64], usize) -> Vec<f64>,
    outputs: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match reflect(geometry, &BoundaryMode::Neumann, x_prev, x) {
        Reflected::Inside => Ok((x.to_vec(), vec![0.0; outputs])),
        Reflected::Mirrored {
            inside,
            foot,
            part,
            distance,
        } => Ok((inside, q(t, &foot, part).into_iter().map(|v| v * distance).collect())),
        Reflected::Stopped { .. } | Reflected::Failed => Err(Error::Domain(format!(
            "overshoot of {x:?} exceeds the reflection reach"
        ))),
    }
}

/// A reflection event recorded on a path.
#[derive(Clone, Debug, PartialEq)]
pub struct Reflection {
    pub path: usize,
    /// Index of the reflected state (`n + 1` for the step `n → n + 1`).
    pub step: usize,
    pub foot: Vec<f64>,
    pub part: usize,
    pub distance: f64,
}

/// Exit of a stopped path.
#[derive(Clone, Debug, PartialEq)]
pub struct ExitRecord {
    /// Index of the state holding the exit point.
    pub step: usize,
    pub point: Vec<f64>,
    pub part: usize,
}

/// Forward states of one channel for all paths.
#[derive(Clone, Debug)]
pub struct PathBundle {
    paths: usize,
    steps: usize,
    dim: usize,
    coef: f64,
    states: Vec<f64>,
    raw: Vec<f64>,
    increments: Vec<f64>,
    alive: Vec<bool>,
    exits: Vec<Option<ExitRecord>>,
    reflections: Vec<Reflection>,
    resampled: usize,
}

/// Euler–Maruyama paths `X_{n+1} = X_n + √(2 coef) ΔW_n` started from the
/// rows of `x0`, post-processed by the boundary mode at every step.
pub fn euler_forward(
    x0: &Array,
    coef: f64,
    batch: &BrownianBatch,
    channel: usize,
    geometry: &Geometry,
    mode: &BoundaryMode,
) -> Result<PathBundle> {
    check_coef(coef)?;
    let (paths, steps, dim) = (batch.paths(), batch.steps(), batch.dim());
    if x0.rows() != paths || x0.cols() != dim || geometry.dim() != dim {
        return Err(Error::Configuration(format!(
            "initial points {}x{} do not match {paths} paths in d = {dim} (geometry d = {})",
            x0.rows(),
            x0.cols(),
            geometry.dim()
        )));
    }
    if channel >= batch.channels() {
        return Err(Error::Configuration(format!("channel {channel} not in batch")));
    }
    let sigma = (2.0 * coef).sqrt();
    let bounded = geometry.is_bounded() && *mode != BoundaryMode::Free;
    let mut b = PathBundle {
        paths,
        steps,
        dim,
        coef,
        states: vec![0.0; paths * (steps + 1) * dim],
        raw: vec![0.0; paths * (steps + 1) * dim],
        increments: batch.channel(channel).to_vec(),
        alive: vec![true; paths * (steps + 1)],
        exits: vec![None; paths],
        reflections: Vec::new(),
        resampled: 0,
    };
    for k in 0..paths {
        let start = x0.row_slice(k);
        if bounded && !geometry.contains(start) {
            return Err(Error::Domain(format!("initial point {start:?} outside the domain")));
        }
        b.put(k, 0, start);
        if bounded && *mode == BoundaryMode::Dirichlet && !geometry.interior(start) {
            b.exits[k] = Some(ExitRecord {
                step: 0,
                point: start.to_vec(),
                part: 0,
            });
        }
        let mut stopped_at = b.exits[k].as_ref().map(|e| e.step);
        for n in 0..steps {
            let prev = b.state(k, n).to_vec();
            if let Some(s) = stopped_at {
                // Frozen after exit.
                b.put(k, n + 1, &prev);
                b.alive[k * (steps + 1) + n + 1] = false;
                if s <= n {
                    b.increment_mut(k, n).iter_mut().for_each(|v| *v = 0.0);
                }
                continue;
            }
            let mut attempt = 0u64;
            loop {
                let inc = b.increment(k, n).to_vec();
                let cand: Vec<f64> = prev.iter().zip(&inc).map(|(x, w)| x + sigma * w).collect();
                if !bounded {
                    b.put(k, n + 1, &cand);
                    break;
                }
                match reflect(geometry, mode, &prev, &cand) {
                    Reflected::Inside => {
                        b.put(k, n + 1, &cand);
                    }
                    Reflected::Mirrored {
                        inside,
                        foot,
                        part,
                        distance,
                    } => {
                        b.put(k, n + 1, &inside);
                        b.put_raw(k, n + 1, &cand);
                        b.reflections.push(Reflection {
                            path: k,
                            step: n + 1,
                            foot,
                            part,
                            distance,
                        });
                    }
                    Reflected::Stopped { point, part } => {
                        let (state, inc) = repaired(&prev, &point, sigma);
                        b.increment_mut(k, n).copy_from_slice(&inc);
                        b.put(k, n + 1, &state);
                        b.alive[k * (steps + 1) + n + 1] = false;
                        b.exits[k] = Some(ExitRecord {
                            step: n + 1,
                            point: state,
                            part,
                        });
                        stopped_at = Some(n + 1);
                    }
                    Reflected::Failed => {
                        attempt += 1;
                        b.resampled += 1;
                        if attempt > 1000 {
                            return Err(Error::Domain(format!(
                                "path {k} could not be kept inside the domain at step {n}"
                            )));
                        }
                        let mut rng = rng_for(&[batch.seed(), channel as u64, k as u64, n as u64, attempt, 0x5EED]);
                        let sd = batch.dt().sqrt();
                        for w in b.increment_mut(k, n) {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            *w = sd * z;
                        }
                        continue;
                    }
                }
                break;
            }
        }
    }
    Ok(b)
}

impl PathBundle {
    fn idx(&self, k: usize, n: usize) -> usize {
        (k * (self.steps + 1) + n) * self.dim
    }

    fn put(&mut self, k: usize, n: usize, x: &[f64]) {
        let o = self.idx(k, n);
        self.states[o..o + self.dim].copy_from_slice(x);
        self.raw[o..o + self.dim].copy_from_slice(x);
    }

    fn put_raw(&mut self, k: usize, n: usize, x: &[f64]) {
        let o = self.idx(k, n);
        self.raw[o..o + self.dim].copy_from_slice(x);
    }

    fn increment_mut(&mut self, k: usize, n: usize) -> &mut [f64] {
        let o = (k * self.steps + n) * self.dim;
        &mut self.increments[o..o + self.dim]
    }

    pub fn paths(&self) -> usize {
        self.paths
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn coef(&self) -> f64 {
        self.coef
    }

    /// Stored state `X_n` of path `k`.
    pub fn state(&self, k: usize, n: usize) -> &[f64] {
        let o = self.idx(k, n);
        &self.states[o..o + self.dim]
    }

    /// Euler candidate before reflection (equal to the state otherwise).
    pub fn raw_state(&self, k: usize, n: usize) -> &[f64] {
        let o = self.idx(k, n);
        &self.raw[o..o + self.dim]
    }

    /// Stored (possibly repaired or redrawn) increment of step `n → n + 1`.
    pub fn increment(&self, k: usize, n: usize) -> &[f64] {
        let o = (k * self.steps + n) * self.dim;
        &self.increments[o..o + self.dim]
    }

    /// Whether state `n` of path `k` precedes the path's exit, i.e. whether
    /// the step `n → n + 1` is an active step of the backward recursion.
    pub fn alive(&self, k: usize, n: usize) -> bool {
        self.alive[k * (self.steps + 1) + n]
    }

    pub fn exit(&self, k: usize) -> Option<&ExitRecord> {
        self.exits[k].as_ref()
    }

    /// Index of the state used as terminal point of path `k`.
    pub fn terminal_step(&self, k: usize) -> usize {
        self.exit(k).map_or(self.steps, |e| e.step)
    }

    pub fn reflections(&self) -> &[Reflection] {
        &self.reflections
    }

    /// Number of redrawn increments after unresolved overshoots.
    pub fn resampled(&self) -> usize {
        self.resampled
    }

    /// Largest deviation from `raw_{n+1} = X_n + √(2 coef) ΔW_n` over the
    /// steps that were taken.
    pub fn euler_defect(&self) -> f64 {
        let sigma = (2.0 * self.coef).sqrt();
        let mut worst = 0.0_f64;
        for k in 0..self.paths {
            for n in 0..self.steps {
                if !self.alive(k, n) {
                    continue;
                }
                let (a, b, w) = (self.state(k, n), self.raw_state(k, n + 1), self.increment(k, n));
                for i in 0..self.dim {
                    worst = worst.max((b[i] - (a[i] + sigma * w[i])).abs());
                }
            }
        }
        worst
    }

    /// All states at step `n` as a `K x d` array.
    pub fn states_at(&self, n: usize) -> Array {
        let mut data = Vec::with_capacity(self.paths * self.dim);
        for k in 0..self.paths {
            data.extend_from_slice(self.state(k, n));
        }
        Array::new(self.paths, self.dim, data).expect("state block")
    }
}

/// Write paths as CSV with columns `path,step,channel,x_1..x_d,alive`.
pub fn write_paths_csv(mut out: impl Write, bundles: &[PathBundle]) -> Result<()> {
    let dim = bundles.first().map_or(0, PathBundle::dim);
    let mut header = String::from("path,step,channel");
    for i in 1..=dim {
        header.push_str(&format!(",x_{i}"));
    }
    writeln!(out, "{header},alive")?;
    for (c, b) in bundles.iter().enumerate() {
        for k in 0..b.paths() {
            for n in 0..=b.steps() {
                let mut line = format!("{k},{n},{c}");
                for v in b.state(k, n) {
                    line.push_str(&format!(",{v}"));
                }
                writeln!(out, "{line},{}", u8::from(b.alive(k, n)))?;
            }
        }
    }
    Ok(())
}

/// First exit times of `paths` independent Brownian paths `x0 + √(2 coef) W`
/// from `geometry`, simulated with step `dt`; `None` when a path is still
/// inside after `max_steps` steps.
pub fn exit_times(
    geometry: &Geometry,
    x0: &[f64],
    coef: f64,
    dt: f64,
    paths: usize,
    max_steps: usize,
    seed: u64,
) -> Result<Vec<Option<f64>>> {
    check_coef(coef)?;
    if !geometry.interior(x0) {
        return Err(Error::Usage(format!("{x0:?} is not inside the domain")));
    }
    let step = (2.0 * coef * dt).sqrt();
    let mut out = Vec::with_capacity(paths);
    let mut x = vec![0.0; x0.len()];
    for k in 0..paths {
        let mut rng = rng_for(&[seed, 0xE417, k as u64]);
        x.copy_from_slice(x0);
        let mut hit = None;
        for n in 0..max_steps {
            for xi in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *xi += step * z;
            }
            if !geometry.interior(&x) {
                hit = Some((n + 1) as f64 * dt);
                break;
            }
        }
        out.push(hit);
    }
    Ok(out)
}
