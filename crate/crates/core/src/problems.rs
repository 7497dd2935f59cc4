//! Problem definitions: coefficients, drivers, terminal and boundary data,
//! closed-form solutions, the Cahn–Hilliard diagonalization and the
//! forward/backward time reversal.
//!
//! The solver works on the backward form of each system. Closed forms are
//! stated for the forward problem and converted by [`BackwardSolution`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Scalar, Tape, Var};
use crate::error::{Error, Result};
use crate::sde::{BoundaryMode, Geometry, PartMode, TimeGrid};

/// Eigen-decomposition of `A = [[0, L_d], [−γ²/δ, S]]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChDiagonalization {
    pub lambda1: f64,
    pub lambda2: f64,
    /// Eigenvectors `(1, λ/L_d)` as columns.
    pub r: [[f64; 2]; 2],
    pub r_inv: [[f64; 2]; 2],
}

fn mat2(a: [[f64; 2]; 2], b: [[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let mut c = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    c
}

/// Smallest stabilization parameter for which the diagonalization exists
/// (the bound itself is excluded).
pub fn min_stabilization(l_d: f64, gamma: f64, delta: f64) -> f64 {
    2.0 * gamma * (l_d / delta).sqrt()
}

pub fn ch_diagonalize(l_d: f64, gamma: f64, delta: f64, s: f64) -> Result<ChDiagonalization> {
    if !(l_d > 0.0 && gamma > 0.0 && delta > 0.0) {
        return Err(Error::Configuration(format!(
            "L_d, γ and δ must be positive (got {l_d}, {gamma}, {delta})"
        )));
    }
    let bound = min_stabilization(l_d, gamma, delta);
    if !(s > bound) {
        return Err(Error::Configuration(format!(
            "stabilization S = {s} must exceed 2γ√(L_d/δ) = {bound:.6e}"
        )));
    }
    let prod = gamma * gamma * l_d / delta;
    let root = (s * s - 4.0 * prod).sqrt();
    let lambda1 = (s + root) / 2.0;
    // Product form avoids cancellation in the smaller root.
    let lambda2 = prod / lambda1;
    let r = [[1.0, 1.0], [lambda1 / l_d, lambda2 / l_d]];
    let det = lambda2 - lambda1;
    let r_inv = [[lambda2 / det, -l_d / det], [-lambda1 / det, l_d / det]];
    let diag = ChDiagonalization {
        lambda1,
        lambda2,
        r,
        r_inv,
    };
    let a = [[0.0, l_d], [-gamma * gamma / delta, s]];
    let err = diag.reconstruction_error(a);
    if err > 1e-12 {
        return Err(Error::Configuration(format!(
            "diagonalization residual {err:.3e} exceeds 1e-12"
        )));
    }
    Ok(diag)
}

impl ChDiagonalization {
    /// `‖R D R⁻¹ − A‖_max`.
    pub fn reconstruction_error(&self, a: [[f64; 2]; 2]) -> f64 {
        let d = [[self.lambda1, 0.0], [0.0, self.lambda2]];
        let m = mat2(mat2(self.r, d), self.r_inv);
        let mut worst = 0.0_f64;
        for i in 0..2 {
            for j in 0..2 {
                worst = worst.max((m[i][j] - a[i][j]).abs());
            }
        }
        worst
    }

    /// `R⁻¹ (a, b)ᵀ`.
    pub fn rotate<S: Scalar>(&self, a: &S, b: &S) -> (S, S) {
        let m = &self.r_inv;
        (
            a.scale(m[0][0]).add(&b.scale(m[0][1])),
            a.scale(m[1][0]).add(&b.scale(m[1][1])),
        )
    }

    /// `R (a, b)ᵀ`.
    pub fn unrotate<S: Scalar>(&self, a: &S, b: &S) -> (S, S) {
        let m = &self.r;
        (
            a.scale(m[0][0]).add(&b.scale(m[0][1])),
            a.scale(m[1][0]).add(&b.scale(m[1][1])),
        )
    }
}

/// Navier–Stokes driver `f + ∇p + (Y·∇)Y`, with `z[i][j] = ∂Y_i/∂x_j`.
pub fn ns_driver<S: Scalar>(y: &[S], z: &[Vec<S>], grad_p: &[S], f: &[S]) -> Vec<S> {
    (0..y.len())
        .map(|i| {
            let mut acc = f[i].add(&grad_p[i]);
            for (j, yj) in y.iter().enumerate() {
                acc = acc.add(&yj.mul(&z[i][j]));
            }
            acc
        })
        .collect()
}

/// Velocity driver of the coupled system: [`ns_driver`] plus `C φ ∇μ`.
pub fn chns_u_driver<S: Scalar>(y: &[S], z: &[Vec<S>], grad_p: &[S], phi: &S, grad_mu: &[S], c: f64, f1: &[S]) -> Vec<S> {
    let base = ns_driver(y, z, grad_p, f1);
    if c == 0.0 {
        return base;
    }
    base.iter()
        .zip(grad_mu)
        .map(|(b, g)| b.add(&phi.mul(g).scale(c)))
        .collect()
}

/// Rotated Cahn–Hilliard drivers `R⁻¹ (f₂ + u·∇φ, (S/L_d)(u·∇φ + f₂) − (μ + φ − φ³)/δ)`.
pub fn ch_driver_hat<S: Scalar>(phi: &S, mu: &S, convection: &S, f2: &S, ch: &CahnHilliardSpec, diag: &ChDiagonalization) -> (S, S) {
    let a = f2.add(convection);
    let reaction = mu.add(phi).sub(&phi.powi(3));
    let b = a.scale(ch.s / ch.l_d).sub(&reaction.scale(1.0 / ch.delta));
    diag.rotate(&a, &b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NavierStokesSpec {
    pub dim: usize,
    pub nu: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CahnHilliardSpec {
    pub dim: usize,
    pub l_d: f64,
    pub gamma: f64,
    pub delta: f64,
    pub s: f64,
}

impl CahnHilliardSpec {
    pub fn diagonalize(&self) -> Result<ChDiagonalization> {
        ch_diagonalize(self.l_d, self.gamma, self.delta, self.s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChnsSpec {
    pub ns: NavierStokesSpec,
    pub ch: CahnHilliardSpec,
    /// Capillary coupling strength.
    pub c: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "problem", rename_all = "lowercase")]
pub enum ProblemKind {
    #[serde(rename = "ns")]
    NavierStokes(NavierStokesSpec),
    #[serde(rename = "ch")]
    CahnHilliard(CahnHilliardSpec),
    Chns(ChnsSpec),
}

impl ProblemKind {
    pub fn dim(&self) -> usize {
        match self {
            ProblemKind::NavierStokes(s) => s.dim,
            ProblemKind::CahnHilliard(s) => s.dim,
            ProblemKind::Chns(s) => s.ns.dim,
        }
    }

    pub fn ns(&self) -> Option<&NavierStokesSpec> {
        match self {
            ProblemKind::NavierStokes(s) => Some(s),
            ProblemKind::Chns(s) => Some(&s.ns),
            ProblemKind::CahnHilliard(_) => None,
        }
    }

    pub fn ch(&self) -> Option<&CahnHilliardSpec> {
        match self {
            ProblemKind::CahnHilliard(s) => Some(s),
            ProblemKind::Chns(s) => Some(&s.ch),
            ProblemKind::NavierStokes(_) => None,
        }
    }

    /// Coupling strength (zero outside the coupled system).
    pub fn coupling(&self) -> f64 {
        match self {
            ProblemKind::Chns(s) => s.c,
            _ => 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim() == 0 {
            return Err(Error::Configuration("dimension must be positive".into()));
        }
        if let Some(ns) = self.ns() {
            if !(ns.nu > 0.0) {
                return Err(Error::Configuration(format!("viscosity must be positive, got {}", ns.nu)));
            }
        }
        if let ProblemKind::Chns(s) = self {
            if s.ns.dim != s.ch.dim {
                return Err(Error::Configuration("velocity and phase dimensions differ".into()));
            }
        }
        if let Some(ch) = self.ch() {
            ch.diagonalize()?;
        }
        Ok(())
    }
}

/// Boundary treatment of a problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryKind {
    WholeSpace,
    /// Values prescribed on the boundary; paths stop at first exit.
    Dirichlet,
    /// Normal derivatives prescribed; paths are reflected.
    Neumann,
    /// Phase values and potential normal derivatives prescribed (phase
    /// channel stops, potential channel reflects).
    Mixed,
    /// Periodic in every coordinate; paths run in the whole space and the
    /// network sees the trigonometric embedding.
    Periodic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundarySpec {
    pub kind: BoundaryKind,
    pub geometry: Geometry,
    /// Boundary parts on which Dirichlet paths are reflected instead of
    /// stopped (e.g. an outflow face).
    #[serde(default)]
    pub reflect_parts: Vec<usize>,
    /// Periods of the input embedding, when the solution is periodic.
    #[serde(default)]
    pub periods: Option<Vec<f64>>,
}

impl BoundarySpec {
    pub fn whole_space(dim: usize) -> Self {
        Self {
            kind: BoundaryKind::WholeSpace,
            geometry: Geometry::Whole { dim },
            reflect_parts: Vec::new(),
            periods: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        let bounded = self.geometry.is_bounded();
        match self.kind {
            BoundaryKind::WholeSpace => {}
            BoundaryKind::Periodic => {
                if self.periods.is_none() {
                    return Err(Error::Configuration("periodic boundary needs periods".into()));
                }
            }
            _ if !bounded => {
                return Err(Error::Configuration(format!(
                    "{:?} boundary needs a bounded geometry",
                    self.kind
                )))
            }
            _ => {}
        }
        if let Some(p) = &self.periods {
            if p.len() != self.geometry.dim() {
                return Err(Error::Configuration("one period per coordinate required".into()));
            }
            if let Geometry::Box { lo, hi } = &self.geometry {
                for ((l, h), pi) in lo.iter().zip(hi).zip(p) {
                    if ((h - l) - pi).abs() > 1e-12 * pi.abs().max(1.0) {
                        return Err(Error::Configuration(format!(
                            "period {pi} differs from box edge {}",
                            h - l
                        )));
                    }
                }
            }
        }
        if let Some(&bad) = self.reflect_parts.iter().find(|&&p| p >= self.geometry.part_count().max(1)) {
            return Err(Error::Configuration(format!("boundary part {bad} does not exist")));
        }
        Ok(())
    }

    /// Path treatment for a channel whose data are values (`stop`) or
    /// normal derivatives (`!stop`).
    fn mode(&self, stop: bool) -> BoundaryMode {
        if !self.geometry.is_bounded() {
            return BoundaryMode::Free;
        }
        let base = if stop { PartMode::Stop } else { PartMode::Reflect };
        if self.reflect_parts.is_empty() || !stop {
            return if stop { BoundaryMode::Dirichlet } else { BoundaryMode::Neumann };
        }
        let mut modes = vec![base; self.geometry.part_count()];
        for &p in &self.reflect_parts {
            modes[p] = PartMode::Reflect;
        }
        BoundaryMode::Mixed(modes)
    }

    /// Path treatment of the velocity channel.
    pub fn velocity_mode(&self) -> BoundaryMode {
        match self.kind {
            BoundaryKind::WholeSpace | BoundaryKind::Periodic => BoundaryMode::Free,
            BoundaryKind::Dirichlet => self.mode(true),
            BoundaryKind::Neumann | BoundaryKind::Mixed => self.mode(false),
        }
    }

    /// Path treatment of the rotated phase (`φ̂`) channel.
    pub fn phase_mode(&self) -> BoundaryMode {
        match self.kind {
            BoundaryKind::WholeSpace | BoundaryKind::Periodic => BoundaryMode::Free,
            BoundaryKind::Dirichlet | BoundaryKind::Mixed => self.mode(true),
            BoundaryKind::Neumann => self.mode(false),
        }
    }

    /// Path treatment of the rotated potential (`μ̂`) channel.
    pub fn potential_mode(&self) -> BoundaryMode {
        match self.kind {
            BoundaryKind::WholeSpace | BoundaryKind::Periodic => BoundaryMode::Free,
            BoundaryKind::Dirichlet => self.mode(true),
            BoundaryKind::Neumann | BoundaryKind::Mixed => self.mode(false),
        }
    }
}

/// Closed-form solutions of the forward problems. Pressures use the gauge
/// `c = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "kebab-case")]
pub enum ExactSolution {
    /// 2D Taylor–Green vortex with decay `e^{−2νt}`, no forcing.
    TaylorGreen { nu: f64 },
    /// 3D Arnold–Beltrami–Childress flow with decay `e^{−νt}`, no forcing.
    Abc { a: f64, b: f64, c: f64, nu: f64 },
    /// `φ = e^{−t} cos(π/√d Σ x_i)` for the stabilized Cahn–Hilliard system.
    ChCosine { ch: CahnHilliardSpec },
    /// Taylor–Green velocity with decay `e^{−t}` and `φ = e^{−t} sin x₁ sin x₂`.
    Chns { nu: f64, c: f64, ch: CahnHilliardSpec },
}

/// Coefficients of `μ = a e^{−t} P + b e^{−3t} P³` for `φ = e^{−t} P` with
/// `ΔP = −κ P`, chosen so that the stabilized potential equation holds
/// exactly once the phase source balances the phase equation.
fn potential_coeffs(ch: &CahnHilliardSpec, kappa: f64) -> (f64, f64) {
    let a = (ch.gamma * ch.gamma * kappa - 1.0 - ch.s * ch.delta / ch.l_d) / (1.0 - ch.delta);
    let b = 1.0 / (1.0 - 3.0 * ch.delta);
    (a, b)
}

fn sum_all<S: Scalar>(x: &[S]) -> S {
    let mut acc = x[0].clone();
    for v in &x[1..] {
        acc = acc.add(v);
    }
    acc
}

impl ExactSolution {
    pub fn dim(&self) -> usize {
        match self {
            ExactSolution::TaylorGreen { .. } | ExactSolution::Chns { .. } => 2,
            ExactSolution::Abc { .. } => 3,
            ExactSolution::ChCosine { ch } => ch.dim,
        }
    }

    pub fn velocity<S: Scalar>(&self, t: &S, x: &[S]) -> Option<Vec<S>> {
        match *self {
            ExactSolution::TaylorGreen { nu } => Some(tg_velocity(&t.scale(-2.0 * nu).exp(), x)),
            ExactSolution::Chns { .. } => Some(tg_velocity(&t.neg().exp(), x)),
            ExactSolution::Abc { a, b, c, nu } => {
                let e = t.scale(-nu).exp();
                let (s1, c1) = (x[0].sin(), x[0].cos());
                let (s2, c2) = (x[1].sin(), x[1].cos());
                let (s3, c3) = (x[2].sin(), x[2].cos());
                Some(vec![
                    s3.scale(a).add(&c2.scale(c)).mul(&e),
                    s1.scale(b).add(&c3.scale(a)).mul(&e),
                    s2.scale(c).add(&c1.scale(b)).mul(&e),
                ])
            }
            ExactSolution::ChCosine { .. } => None,
        }
    }

    pub fn pressure<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        match *self {
            ExactSolution::TaylorGreen { nu } => Some(tg_pressure(&t.scale(-4.0 * nu).exp(), x)),
            ExactSolution::Chns { .. } => Some(tg_pressure(&t.scale(-2.0).exp(), x)),
            ExactSolution::Abc { a, b, c, nu } => {
                let e = t.scale(-2.0 * nu).exp();
                let (s1, c1) = (x[0].sin(), x[0].cos());
                let (s2, c2) = (x[1].sin(), x[1].cos());
                let (s3, c3) = (x[2].sin(), x[2].cos());
                let sum = c1
                    .mul(&s2)
                    .scale(b * c)
                    .add(&s1.mul(&c3).scale(a * b))
                    .add(&s3.mul(&c2).scale(a * c));
                Some(sum.mul(&e).neg())
            }
            ExactSolution::ChCosine { .. } => None,
        }
    }

    pub fn pressure_gradient<S: Scalar>(&self, t: &S, x: &[S]) -> Option<Vec<S>> {
        match *self {
            ExactSolution::TaylorGreen { nu } => Some(tg_pressure_gradient(&t.scale(-4.0 * nu).exp(), x)),
            ExactSolution::Chns { .. } => Some(tg_pressure_gradient(&t.scale(-2.0).exp(), x)),
            ExactSolution::Abc { a, b, c, nu } => {
                let e = t.scale(-2.0 * nu).exp();
                let (s1, c1) = (x[0].sin(), x[0].cos());
                let (s2, c2) = (x[1].sin(), x[1].cos());
                let (s3, c3) = (x[2].sin(), x[2].cos());
                Some(vec![
                    s1.mul(&s2).scale(b * c).sub(&c1.mul(&c3).scale(a * b)).mul(&e),
                    s3.mul(&s2).scale(a * c).sub(&c1.mul(&c2).scale(b * c)).mul(&e),
                    s1.mul(&s3).scale(a * b).sub(&c3.mul(&c2).scale(a * c)).mul(&e),
                ])
            }
            ExactSolution::ChCosine { .. } => None,
        }
    }

    /// Spatial profile `P`, with `ΔP = −κP`.
    fn profile<S: Scalar>(&self, x: &[S]) -> Option<(S, f64)> {
        match *self {
            ExactSolution::ChCosine { ch } => {
                let k = std::f64::consts::PI / (ch.dim as f64).sqrt();
                Some((sum_all(x).scale(k).cos(), std::f64::consts::PI * std::f64::consts::PI))
            }
            ExactSolution::Chns { .. } => Some((x[0].sin().mul(&x[1].sin()), 2.0)),
            _ => None,
        }
    }

    /// `Δ(P³)`.
    fn laplacian_cube<S: Scalar>(&self, x: &[S], p: &S) -> S {
        match self {
            ExactSolution::ChCosine { .. } => {
                let pi2 = std::f64::consts::PI * std::f64::consts::PI;
                p.scale(6.0).sub(&p.powi(3).scale(9.0)).scale(pi2)
            }
            _ => {
                let (s1, s2) = (x[0].sin(), x[1].sin());
                let sq = s1.mul(&s1).add(&s2.mul(&s2));
                p.mul(&sq).scale(6.0).sub(&p.powi(3).scale(18.0))
            }
        }
    }

    fn ch_spec(&self) -> Option<&CahnHilliardSpec> {
        match self {
            ExactSolution::ChCosine { ch } | ExactSolution::Chns { ch, .. } => Some(ch),
            _ => None,
        }
    }

    pub fn phase<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        let (p, _) = self.profile(x)?;
        Some(t.neg().exp().mul(&p))
    }

    pub fn potential<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        let ch = self.ch_spec()?;
        let (p, kappa) = self.profile(x)?;
        let (a, b) = potential_coeffs(ch, kappa);
        let e1 = t.neg().exp();
        let e3 = t.scale(-3.0).exp();
        Some(e1.mul(&p).scale(a).add(&e3.mul(&p.powi(3)).scale(b)))
    }

    fn potential_laplacian<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        let ch = self.ch_spec()?;
        let (p, kappa) = self.profile(x)?;
        let (a, b) = potential_coeffs(ch, kappa);
        let e1 = t.neg().exp();
        let e3 = t.scale(-3.0).exp();
        Some(e1.mul(&p).scale(-a * kappa).add(&e3.mul(&self.laplacian_cube(x, &p)).scale(b)))
    }

    /// `∇μ` for the coupled solution.
    fn potential_gradient<S: Scalar>(&self, t: &S, x: &[S]) -> Option<Vec<S>> {
        let ExactSolution::Chns { ch, .. } = self else { return None };
        let (p, kappa) = self.profile(x)?;
        let (a, b) = potential_coeffs(ch, kappa);
        let factor = t.neg().exp().scale(a).add(&t.scale(-3.0).exp().mul(&p.mul(&p)).scale(3.0 * b));
        let (s1, c1) = (x[0].sin(), x[0].cos());
        let (s2, c2) = (x[1].sin(), x[1].cos());
        Some(vec![factor.mul(&c1.mul(&s2)), factor.mul(&s1.mul(&c2))])
    }

    /// Velocity forcing (`f`, or `f₁` in the coupled system).
    pub fn force<S: Scalar>(&self, t: &S, x: &[S]) -> Vec<S> {
        match *self {
            ExactSolution::Chns { nu, c, .. } => {
                let u = self.velocity(t, x).expect("velocity");
                let phi = self.phase(t, x).expect("phase");
                let gm = self.potential_gradient(t, x).expect("potential");
                u.iter()
                    .zip(&gm)
                    .map(|(ui, gi)| ui.scale(1.0 - 2.0 * nu).sub(&phi.mul(gi).scale(c)))
                    .collect()
            }
            _ => (0..self.dim()).map(|_| t.lift(0.0)).collect(),
        }
    }

    /// Phase source (`f`, or `f₂` in the coupled system).
    pub fn phase_source<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        let ch = self.ch_spec()?;
        let phi = self.phase(t, x)?;
        let mut f = self.potential_laplacian(t, x)?.scale(ch.l_d).add(&phi);
        if let ExactSolution::Chns { .. } = self {
            f = f.sub(&self.convection(t, x)?);
        }
        Some(f)
    }

    /// `u·∇φ` for the coupled solution.
    fn convection<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        let ExactSolution::Chns { .. } = self else { return None };
        let (s1, c1) = (x[0].sin(), x[0].cos());
        let (s2, c2) = (x[1].sin(), x[1].cos());
        let a = s1.mul(&c2);
        let b = c1.mul(&s2);
        Some(a.mul(&a).sub(&b.mul(&b)).mul(&t.scale(-2.0).exp()))
    }
}

fn tg_velocity<S: Scalar>(e: &S, x: &[S]) -> Vec<S> {
    vec![
        x[0].cos().mul(&x[1].sin()).mul(e).neg(),
        x[0].sin().mul(&x[1].cos()).mul(e),
    ]
}

fn tg_pressure<S: Scalar>(e: &S, x: &[S]) -> S {
    x[0].scale(2.0).cos().add(&x[1].scale(2.0).cos()).mul(e).scale(-0.25)
}

fn tg_pressure_gradient<S: Scalar>(e: &S, x: &[S]) -> Vec<S> {
    vec![
        x[0].scale(2.0).sin().mul(e).scale(0.5),
        x[1].scale(2.0).sin().mul(e).scale(0.5),
    ]
}

/// Backward-frame view of a forward closed form under
/// `(u, p, φ, μ, f)(t, x) → (−u, p, −φ, −μ, f)(T − t, x)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackwardSolution {
    pub forward: ExactSolution,
    pub horizon: f64,
}

impl BackwardSolution {
    fn reversed<S: Scalar>(&self, t: &S) -> S {
        t.neg().shift(self.horizon)
    }

    pub fn velocity<S: Scalar>(&self, t: &S, x: &[S]) -> Option<Vec<S>> {
        let v = self.forward.velocity(&self.reversed(t), x)?;
        Some(v.iter().map(Scalar::neg).collect())
    }

    pub fn pressure<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        self.forward.pressure(&self.reversed(t), x)
    }

    pub fn pressure_gradient<S: Scalar>(&self, t: &S, x: &[S]) -> Option<Vec<S>> {
        self.forward.pressure_gradient(&self.reversed(t), x)
    }

    pub fn phase<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        Some(self.forward.phase(&self.reversed(t), x)?.neg())
    }

    pub fn potential<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        Some(self.forward.potential(&self.reversed(t), x)?.neg())
    }

    pub fn force<S: Scalar>(&self, t: &S, x: &[S]) -> Vec<S> {
        self.forward.force(&self.reversed(t), x)
    }

    pub fn phase_source<S: Scalar>(&self, t: &S, x: &[S]) -> Option<S> {
        self.forward.phase_source(&self.reversed(t), x)
    }
}

/// Field values at one space-time point.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub velocity: Option<Vec<f64>>,
    pub pressure: Option<f64>,
    pub phase: Option<f64>,
    pub potential: Option<f64>,
}

/// Map a sample between the forward and backward frames on `[0, T]`. The
/// map is its own inverse, so it also serves as `map_back`.
pub fn time_reverse(sample: &FieldSample, horizon: f64) -> FieldSample {
    FieldSample {
        t: horizon - sample.t,
        x: sample.x.clone(),
        velocity: sample.velocity.as_ref().map(|v| v.iter().map(|a| -a).collect()),
        pressure: sample.pressure,
        phase: sample.phase.map(|v| -v),
        potential: sample.potential.map(|v| -v),
    }
}

pub use time_reverse as map_back;

/// Two-bubble phase profile `max(tanh((r−R₁)/2γ), tanh((r−R₂)/2γ))` with
/// centers `(±0.7r, 0)`, and zero initial velocity.
pub fn interface_initial(x: &[f64], r: f64, gamma: f64) -> (f64, [f64; 2]) {
    let r1 = ((x[0] - 0.7 * r).powi(2) + x[1] * x[1]).sqrt();
    let r2 = ((x[0] + 0.7 * r).powi(2) + x[1] * x[1]).sqrt();
    let phi = ((r - r1) / (2.0 * gamma)).tanh().max(((r - r2) / (2.0 * gamma)).tanh());
    (phi, [0.0, 0.0])
}

/// Data of a concrete problem in the backward frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "data", rename_all = "kebab-case")]
pub enum ProblemData {
    Exact(BackwardSolution),
    /// Lid-driven cavity on the unit square, lid velocity `(1, 0)`.
    Cavity,
    /// Channel flow past a disk with inlet velocity `(u_in, 0)`.
    Obstacle { u_in: f64 },
    /// Two merging bubbles at rest.
    Bubbles { radius: f64, gamma: f64 },
    /// Spatially uniform rest state (the phase should be `0` or `±1`).
    Uniform { velocity: Vec<f64>, phase: f64 },
}

/// Top face of a 2D box (`x₂ = hi`).
const TOP: usize = 3;
const BOTTOM: usize = 2;
const LEFT: usize = 0;

impl ProblemData {
    pub fn exact(&self) -> Option<&BackwardSolution> {
        match self {
            ProblemData::Exact(e) => Some(e),
            _ => None,
        }
    }

    /// Velocity forcing at `(t, x)`.
    pub fn force(&self, t: f64, x: &[f64]) -> Vec<f64> {
        match self {
            ProblemData::Exact(e) => e.force(&t, x),
            _ => vec![0.0; x.len()],
        }
    }

    pub fn phase_source(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ProblemData::Exact(e) => e.phase_source(&t, x).unwrap_or(0.0),
            _ => 0.0,
        }
    }

    /// Terminal velocity `g_u(x) = u_b(T, x)`.
    pub fn terminal_velocity(&self, x: &[f64]) -> Vec<f64> {
        match self {
            ProblemData::Exact(e) => e.velocity(&e.horizon, x).unwrap_or_else(|| vec![0.0; x.len()]),
            ProblemData::Obstacle { u_in } => vec![-u_in, 0.0],
            ProblemData::Uniform { velocity, .. } => velocity.clone(),
            _ => vec![0.0; x.len()],
        }
    }

    /// Terminal phase `g_φ(x) = φ_b(T, x)`.
    pub fn terminal_phase(&self, x: &[f64]) -> f64 {
        match self {
            ProblemData::Exact(e) => e.phase(&e.horizon, x).unwrap_or(0.0),
            ProblemData::Bubbles { radius, gamma } => -interface_initial(x, *radius, *gamma).0,
            ProblemData::Uniform { phase, .. } => *phase,
            _ => 0.0,
        }
    }

    /// Dirichlet velocity data on boundary part `part` and the mask of
    /// prescribed components.
    pub fn boundary_velocity(&self, t: f64, x: &[f64], part: usize) -> (Vec<f64>, Vec<bool>) {
        let d = x.len();
        match self {
            ProblemData::Exact(e) => (
                e.velocity(&t, x).unwrap_or_else(|| vec![0.0; d]),
                vec![true; d],
            ),
            ProblemData::Cavity => {
                let lid = if part == TOP { -1.0 } else { 0.0 };
                (vec![lid, 0.0], vec![true; 2])
            }
            ProblemData::Obstacle { u_in } => match part {
                LEFT => (vec![-u_in, 0.0], vec![true, true]),
                TOP | BOTTOM => (vec![0.0, 0.0], vec![false, true]),
                _ => (vec![0.0, 0.0], vec![true, true]),
            },
            ProblemData::Bubbles { .. } => (vec![0.0; d], vec![true; d]),
            ProblemData::Uniform { velocity, .. } => (velocity.clone(), vec![true; d]),
        }
    }

    /// Dirichlet phase data.
    pub fn boundary_phase(&self, t: f64, x: &[f64]) -> f64 {
        match self {
            ProblemData::Exact(e) => e.phase(&t, x).unwrap_or(0.0),
            ProblemData::Uniform { phase, .. } => *phase,
            _ => 0.0,
        }
    }

    /// `∂u/∂n` of the exact velocity.
    pub fn velocity_flux(&self, t: f64, x: &[f64], normal: &[f64]) -> Option<Vec<f64>> {
        if let ProblemData::Uniform { .. } = self {
            return Some(vec![0.0; x.len()]);
        }
        let e = self.exact()?;
        let m = e.velocity(&t, x)?.len();
        Some(
            (0..m)
                .map(|i| directional_derivative(x, normal, |xs| e.velocity(&xs[0].lift(t), xs).expect("velocity")[i]))
                .collect(),
        )
    }

    /// `∂φ/∂n` of the exact phase.
    pub fn phase_flux(&self, t: f64, x: &[f64], normal: &[f64]) -> Option<f64> {
        if let ProblemData::Uniform { .. } = self {
            return Some(0.0);
        }
        let e = self.exact()?;
        e.phase(&t, x)?;
        Some(directional_derivative(x, normal, |xs| e.phase(&xs[0].lift(t), xs).expect("phase")))
    }

    /// `∂μ/∂n` of the exact potential.
    pub fn potential_flux(&self, t: f64, x: &[f64], normal: &[f64]) -> Option<f64> {
        if let ProblemData::Uniform { .. } = self {
            return Some(0.0);
        }
        let e = self.exact()?;
        e.potential(&t, x)?;
        Some(directional_derivative(x, normal, |xs| e.potential(&xs[0].lift(t), xs).expect("potential")))
    }
}

/// `∇f(x)·n` by reverse-mode differentiation of `f` at a single point.
pub fn directional_derivative<F>(x: &[f64], normal: &[f64], f: F) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    let tape = Tape::new();
    let xs: Vec<Var<'_>> = x.iter().map(|&v| tape.var(Array::scalar(v))).collect();
    let out = f(&xs);
    let grads = tape.grad_wrt(&out, &xs).expect("scalar output");
    grads.iter().zip(normal).map(|(g, n)| g.item() * n).sum()
}

/// A complete problem in the backward frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub kind: ProblemKind,
    pub horizon: f64,
    /// Region of initial and test points.
    pub domain: Geometry,
    pub boundary: BoundarySpec,
    pub data: ProblemData,
}

impl Problem {
    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        self.kind.validate()?;
        self.boundary.validate()?;
        self.domain.validate()?;
        let d = self.kind.dim();
        if self.domain.dim() != d || self.boundary.geometry.dim() != d {
            return Err(Error::Configuration(format!(
                "domain dimension does not match d = {d}"
            )));
        }
        if (grid.horizon() - self.horizon).abs() > 1e-12 {
            return Err(Error::Configuration("time grid horizon differs from T".into()));
        }
        if let Some(ch) = self.kind.ch() {
            if (grid.dt() - ch.delta).abs() > 1e-12 * ch.delta.max(1.0) {
                return Err(Error::Configuration(format!(
                    "time step {} must equal δ = {}",
                    grid.dt(),
                    ch.delta
                )));
            }
        }
        if let ProblemData::Exact(e) = &self.data {
            if e.forward.dim() != d {
                return Err(Error::Configuration("exact solution dimension differs".into()));
            }
            if (e.horizon - self.horizon).abs() > 1e-12 {
                return Err(Error::Configuration("exact solution horizon differs".into()));
            }
        }
        Ok(())
    }
}

/// JSON problem description:
/// `{"problem": "ns"|"ch"|"chns", coefficients, "horizon", "boundary", "domain", "exact"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemConfig {
    pub problem: String,
    pub dim: usize,
    pub horizon: f64,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub l_d: Option<f64>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default)]
    pub s: Option<f64>,
    #[serde(default)]
    pub c: Option<f64>,
    pub boundary: BoundarySpec,
    pub domain: Geometry,
    /// `taylor-green`, `abc`, `ch-cosine`, `chns`, or null.
    #[serde(default)]
    pub exact: Option<String>,
    /// Data for problems without a closed form: `cavity`, `obstacle`,
    /// `bubbles`.
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub u_in: Option<f64>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub abc: Option<[f64; 3]>,
}

fn need(v: Option<f64>, name: &str) -> Result<f64> {
    v.ok_or_else(|| Error::Configuration(format!("missing coefficient `{name}`")))
}

impl ProblemConfig {
    pub fn build(&self) -> Result<Problem> {
        let ch = || -> Result<CahnHilliardSpec> {
            Ok(CahnHilliardSpec {
                dim: self.dim,
                l_d: need(self.l_d, "l_d")?,
                gamma: need(self.gamma, "gamma")?,
                delta: need(self.delta, "delta")?,
                s: need(self.s, "s")?,
            })
        };
        let kind = match self.problem.as_str() {
            "ns" => ProblemKind::NavierStokes(NavierStokesSpec {
                dim: self.dim,
                nu: need(self.nu, "nu")?,
            }),
            "ch" => ProblemKind::CahnHilliard(ch()?),
            "chns" => ProblemKind::Chns(ChnsSpec {
                ns: NavierStokesSpec {
                    dim: self.dim,
                    nu: need(self.nu, "nu")?,
                },
                ch: ch()?,
                c: need(self.c, "c")?,
            }),
            other => {
                return Err(Error::Configuration(format!(
                    "unknown problem `{other}` (expected ns, ch or chns)"
                )))
            }
        };
        let forward = match self.exact.as_deref() {
            None => None,
            Some("taylor-green") => Some(ExactSolution::TaylorGreen {
                nu: need(self.nu, "nu")?,
            }),
            Some("abc") => {
                let [a, b, c] = self.abc.unwrap_or([0.5, 0.5, 0.5]);
                Some(ExactSolution::Abc {
                    a,
                    b,
                    c,
                    nu: need(self.nu, "nu")?,
                })
            }
            Some("ch-cosine") => Some(ExactSolution::ChCosine { ch: ch()? }),
            Some("chns") => Some(ExactSolution::Chns {
                nu: need(self.nu, "nu")?,
                c: need(self.c, "c")?,
                ch: ch()?,
            }),
            Some(other) => {
                return Err(Error::Configuration(format!("unknown exact solution `{other}`")))
            }
        };
        let data = match (forward, self.data.as_deref()) {
            (Some(f), None) => ProblemData::Exact(BackwardSolution {
                forward: f,
                horizon: self.horizon,
            }),
            (None, Some("cavity")) => ProblemData::Cavity,
            (None, Some("obstacle")) => ProblemData::Obstacle {
                u_in: need(self.u_in, "u_in")?,
            },
            (None, Some("bubbles")) => ProblemData::Bubbles {
                radius: self.radius.unwrap_or(0.4),
                gamma: need(self.gamma, "gamma")?,
            },
            (Some(_), Some(_)) => {
                return Err(Error::Configuration("give either `exact` or `data`, not both".into()))
            }
            (None, other) => {
                return Err(Error::Configuration(format!(
                    "problem data `{}` unknown",
                    other.unwrap_or("null")
                )))
            }
        };
        Ok(Problem {
            kind,
            horizon: self.horizon,
            domain: self.domain.clone(),
            boundary: self.boundary.clone(),
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonalization_example() {
        let d = ch_diagonalize(5e-4, 0.01, 0.01, 0.01).unwrap();
        assert!((d.lambda1 - 9.47214e-3).abs() < 1e-8);
        assert!((d.lambda2 - 5.27864e-4).abs() < 1e-9);
        assert!((d.lambda1 + d.lambda2 - 0.01).abs() < 1e-15);
        let a = [[0.0, 5e-4], [-0.01, 0.01]];
        assert!(d.reconstruction_error(a) <= 1e-12);
    }

    #[test]
    fn chns_setting_is_admissible() {
        let bound = min_stabilization(5e-4, 0.01, 0.02);
        assert!((bound - 3.1623e-3).abs() < 1e-7);
        assert!(ch_diagonalize(5e-4, 0.01, 0.02, 0.0032).is_ok());
        let err = ch_diagonalize(5e-4, 0.01, 0.02, 0.003).unwrap_err().to_string();
        assert!(err.contains("3.162"), "{err}");
    }

    #[test]
    fn driver_examples() {
        let zero = vec![0.0, 0.0];
        let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(ns_driver(&zero, &eye, &zero, &zero), vec![0.0, 0.0]);
        assert_eq!(ns_driver(&[1.0, 0.0], &eye, &zero, &zero), vec![1.0, 0.0]);
        let zz = vec![vec![0.0; 2]; 2];
        assert_eq!(ns_driver(&[3.0, 4.0], &zz, &[1.0, 2.0], &[0.5, 0.5]), vec![1.5, 2.5]);
        assert_eq!(
            chns_u_driver(&zero, &zz, &zero, &2.0, &[1.0, -1.0], 1.0, &zero),
            vec![2.0, -2.0]
        );
    }

    #[test]
    fn ch_driver_examples() {
        let spec = CahnHilliardSpec {
            dim: 2,
            l_d: 5e-4,
            gamma: 0.01,
            delta: 0.01,
            s: 0.01,
        };
        let d = spec.diagonalize().unwrap();
        assert_eq!(ch_driver_hat(&0.0, &0.0, &0.0, &0.0, &spec, &d), (0.0, 0.0));
        assert_eq!(ch_driver_hat(&1.0, &0.0, &0.0, &0.0, &spec, &d), (0.0, 0.0));
        let (a, b) = ch_driver_hat(&0.5, &0.2, &0.0, &0.0, &spec, &d);
        let pre = -57.5;
        assert!((a - d.r_inv[0][1] * pre).abs() < 1e-9 * pre.abs() * d.r_inv[0][1].abs());
        assert!((b - d.r_inv[1][1] * pre).abs() < 1e-9 * pre.abs() * d.r_inv[1][1].abs());
    }

    #[test]
    fn exact_examples() {
        let tg = ExactSolution::TaylorGreen { nu: 0.1 };
        let u = tg.velocity(&0.0, &[0.0, std::f64::consts::FRAC_PI_2]).unwrap();
        assert!((u[0] + 1.0).abs() < 1e-15 && u[1].abs() < 1e-15);
        let abc = ExactSolution::Abc {
            a: 0.5,
            b: 0.5,
            c: 0.5,
            nu: 0.1,
        };
        assert_eq!(abc.velocity(&0.0, &[0.0, 0.0, 0.0]).unwrap(), vec![0.5, 0.5, 0.5]);
        let ch = ExactSolution::ChCosine {
            ch: CahnHilliardSpec {
                dim: 4,
                l_d: 5e-4,
                gamma: 0.1,
                delta: 0.01,
                s: 0.1,
            },
        };
        let x = [0.1, -0.3, 0.7, 0.2];
        let expect = (std::f64::consts::PI / 2.0 * 0.7f64).cos();
        assert!((ch.phase(&0.0, &x).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn terminal_is_negated_initial_data() {
        let e = ExactSolution::ChCosine {
            ch: CahnHilliardSpec {
                dim: 2,
                l_d: 5e-4,
                gamma: 0.1,
                delta: 0.01,
                s: 0.1,
            },
        };
        let data = ProblemData::Exact(BackwardSolution {
            forward: e,
            horizon: 0.1,
        });
        let x = [0.3, -0.2];
        assert_eq!(data.terminal_phase(&x), -e.phase(&0.0, &x).unwrap());
    }

    #[test]
    fn reversal_is_an_involution() {
        let s = FieldSample {
            t: 0.03,
            x: vec![1.0, 2.0],
            velocity: Some(vec![0.4, -0.1]),
            pressure: Some(0.7),
            phase: Some(-0.2),
            potential: Some(3.0),
        };
        assert_eq!(map_back(&time_reverse(&s, 0.1), 0.1).velocity, s.velocity);
        let back = map_back(&time_reverse(&s, 0.1), 0.1);
        assert!((back.t - s.t).abs() < 1e-15);
        assert_eq!(back.phase, s.phase);
    }

    #[test]
    fn bubbles_profile() {
        let (phi, u) = interface_initial(&[0.28, 0.0], 0.4, 0.03);
        assert!((phi - (0.4f64 / 0.06).tanh()).abs() < 1e-15);
        assert!(phi > 0.99999);
        assert_eq!(u, [0.0, 0.0]);
        let (a, _) = interface_initial(&[0.13, 0.41], 0.4, 0.03);
        let (b, _) = interface_initial(&[-0.13, 0.41], 0.4, 0.03);
        assert_eq!(a, b);
    }

    #[test]
    fn config_round_trip() {
        let cfg = ProblemConfig {
            problem: "ns".into(),
            dim: 2,
            horizon: 0.1,
            nu: Some(0.1),
            l_d: None,
            gamma: None,
            delta: None,
            s: None,
            c: None,
            boundary: BoundarySpec::whole_space(2),
            domain: Geometry::Box {
                lo: vec![0.0, 0.0],
                hi: vec![1.0, 1.0],
            },
            exact: Some("taylor-green".into()),
            data: None,
            u_in: None,
            radius: None,
            abc: None,
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: ProblemConfig = serde_json::from_str(&json).unwrap();
        let p = back.build().unwrap();
        p.validate(&TimeGrid::new(0.1, 5).unwrap()).unwrap();
        let mut bad = cfg.clone();
        bad.problem = "heat".into();
        assert!(bad.build().is_err());
    }
}
