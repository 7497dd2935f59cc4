//! Self-checks: closed forms substituted into the backward equations via
//! automatic differentiation, diagonalization identities and driver
//! examples.

use serde::Serialize;

use crate::autodiff::{Array, Scalar, Tape, Var};
use crate::error::Result;
use crate::problems::{
    ch_diagonalize, ch_driver_hat, chns_u_driver, ns_driver, BackwardSolution, CahnHilliardSpec, ExactSolution,
};
use crate::sde::{lhs_sample, rng_for};
use crate::trainer::residual_step_ns;

/// Largest absolute residual of each backward equation over a sample.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ResidualReport {
    pub momentum: f64,
    pub divergence: f64,
    pub pressure_gradient: f64,
    pub phase: f64,
    pub potential: f64,
}

impl ResidualReport {
    pub fn max_pde(&self) -> f64 {
        self.momentum.max(self.phase).max(self.potential)
    }
}

fn max_abs(v: &Var<'_>) -> f64 {
    v.value().max_abs()
}

fn d<'t>(tape: &'t Tape, v: &Var<'t>, wrt: &Var<'t>) -> Result<Var<'t>> {
    Ok(tape.grad_graph(&v.sum(), &[*wrt])?[0])
}

fn laplacian<'t>(tape: &'t Tape, v: &Var<'t>, xs: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for x in xs {
        let g = d(tape, v, x)?;
        let h = d(tape, &g, x)?;
        acc = Some(match acc {
            None => h,
            Some(a) => a.add(&h)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Residuals of the backward system satisfied by `sol` at `points` random
/// space-time points drawn from `[0, T] × [lo, hi]^d`.
pub fn backward_residuals(sol: &BackwardSolution, nu: f64, points: usize, lo: f64, hi: f64, seed: u64) -> Result<ResidualReport> {
    use rand::Rng;
    let dim = sol.forward.dim();
    let mut rng = rng_for(&[seed, 0xC4EC]);
    let t_vals: Vec<f64> = (0..points).map(|_| rng.random_range(0.0..=sol.horizon)).collect();
    let tape = Tape::new();
    let t = tape.var(Array::column(t_vals));
    let xs: Vec<Var<'_>> = (0..dim)
        .map(|_| {
            let col: Vec<f64> = (0..points).map(|_| rng.random_range(lo..=hi)).collect();
            tape.var(Array::column(col))
        })
        .collect();
    let mut report = ResidualReport::default();

    let (coupling, ch): (f64, Option<CahnHilliardSpec>) = match sol.forward {
        ExactSolution::Chns { c, ch, .. } => (c, Some(ch)),
        ExactSolution::ChCosine { ch } => (0.0, Some(ch)),
        _ => (0.0, None),
    };
    let phi = sol.phase(&t, &xs);
    let mu = sol.potential(&t, &xs);
    let grad_mu = match &mu {
        Some(m) => Some(xs.iter().map(|x| d(&tape, m, x)).collect::<Result<Vec<_>>>()?),
        None => None,
    };

    let velocity = sol.velocity(&t, &xs);
    if let Some(u) = &velocity {
        let p = sol.pressure(&t, &xs).expect("pressure");
        let gp_closed = sol.pressure_gradient(&t, &xs).expect("pressure gradient");
        let force = sol.force(&t, &xs);
        let mut div: Option<Var<'_>> = None;
        for i in 0..dim {
            let ui = &u[i];
            let dui: Vec<Var<'_>> = xs.iter().map(|x| d(&tape, ui, x)).collect::<Result<_>>()?;
            div = Some(match div {
                None => dui[i],
                Some(a) => a.add(&dui[i])?,
            });
            let gp = d(&tape, &p, &xs[i])?;
            report.pressure_gradient = report.pressure_gradient.max(max_abs(&gp.sub(&gp_closed[i])?));
            let mut r = d(&tape, ui, &t)?
                .add(&laplacian(&tape, ui, &xs)?.scale(nu))?
                .add(&gp)?
                .add(&force[i])?;
            for j in 0..dim {
                r = r.add(&u[j].mul(&dui[j])?)?;
            }
            if let (Some(phi), Some(gm)) = (&phi, &grad_mu) {
                if coupling != 0.0 {
                    r = r.add(&phi.mul(&gm[i])?.scale(coupling))?;
                }
            }
            report.momentum = report.momentum.max(max_abs(&r));
        }
        report.divergence = max_abs(&div.expect("dim > 0"));
    }

    if let (Some(ch), Some(phi), Some(mu)) = (ch, &phi, &mu) {
        let f = sol.phase_source(&t, &xs).expect("source");
        let mut conv = t.lift(0.0).broadcast(points, 1)?;
        if let Some(u) = &velocity {
            for (i, x) in xs.iter().enumerate() {
                conv = conv.add(&u[i].mul(&d(&tape, phi, x)?)?)?;
            }
        }
        let lap_mu = laplacian(&tape, mu, &xs)?;
        let lap_phi = laplacian(&tape, phi, &xs)?;
        let r_phi = d(&tape, phi, &t)?.add(&conv)?.add(&lap_mu.scale(ch.l_d))?.add(&f)?;
        let reaction = mu.add(phi)?.sub(&phi.powi(3))?;
        let r_mu = d(&tape, mu, &t)?
            .sub(&lap_phi.scale(ch.gamma * ch.gamma / ch.delta))?
            .add(&lap_mu.scale(ch.s))?
            .add(&conv.add(&f)?.scale(ch.s / ch.l_d))?
            .sub(&reaction.scale(1.0 / ch.delta))?;
        report.phase = max_abs(&r_phi);
        report.potential = max_abs(&r_mu);
    }
    Ok(report)
}

/// Velocity and its Jacobian `z[i][j] = ∂u_i/∂x_j` at one point.
fn velocity_jacobian(sol: &BackwardSolution, t: f64, x: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let tape = Tape::new();
    let xs: Vec<Var<'_>> = x.iter().map(|&v| tape.var(Array::scalar(v))).collect();
    let u = sol.velocity(&xs[0].lift(t), &xs).expect("velocity");
    let mut z = Vec::with_capacity(u.len());
    for ui in &u {
        z.push(tape.grad_wrt(ui, &xs)?.iter().map(|g| g.item()).collect());
    }
    Ok((u.iter().map(|v| v.item()).collect(), z))
}

/// Median over `paths` of the one-step residual `|Ỹ₁ − u(dt, X₁)|` with the
/// exact backward velocity in place of a network, for each step in
/// `dts` (finest last; each must be an integer multiple of the finest).
/// Increments are sums of the finest increments, so the paths are coupled
/// across step sizes.
pub fn euler_step_residual_medians(sol: &BackwardSolution, nu: f64, dts: &[f64], paths: usize, seed: u64) -> Result<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let dim = sol.forward.dim();
    let fine = *dts.last().expect("at least one step");
    let max_ratio = (dts[0] / fine).round() as usize;
    let x0 = lhs_sample(paths, &vec![0.0; dim], &vec![2.0 * std::f64::consts::PI; dim], seed)?;
    let mut rng = rng_for(&[seed, 0xE0C1]);
    let sigma = (2.0 * nu).sqrt();
    let mut medians = Vec::with_capacity(dts.len());
    let fine_dw: Vec<Vec<f64>> = (0..paths * max_ratio)
        .map(|_| (0..dim).map(|_| { let z: f64 = StandardNormal.sample(&mut rng); fine.sqrt() * z }).collect())
        .collect();
    for &dt in dts {
        let ratio = (dt / fine).round() as usize;
        let mut norms = Vec::with_capacity(paths);
        for k in 0..paths {
            let x = x0.row_slice(k);
            let mut dw = vec![0.0; dim];
            for r in 0..ratio {
                for (acc, v) in dw.iter_mut().zip(&fine_dw[k * max_ratio + r]) {
                    *acc += v;
                }
            }
            let (y, z) = velocity_jacobian(sol, 0.0, x)?;
            let gp = sol.pressure_gradient(&0.0, x).expect("pressure gradient");
            let f = sol.force(&0.0, x);
            let target = residual_step_ns(&y, &z, &gp, &f, &dw, nu, dt, &vec![0.0; dim]);
            let x1: Vec<f64> = x.iter().zip(&dw).map(|(a, w)| a + sigma * w).collect();
            let y1 = sol.velocity(&dt, &x1).expect("velocity");
            norms.push(target.iter().zip(&y1).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
        medians.push(crate::metrics::median(&norms));
    }
    Ok(medians)
}

/// One named self-check.
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

fn check(name: &str, value: f64, tolerance: f64) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        value,
        tolerance,
        passed: value.is_finite() && value <= tolerance,
    }
}

/// Closed forms used by the benchmark experiments, with their viscosity and
/// sampling cube.
pub fn benchmark_solutions() -> Vec<(&'static str, BackwardSolution, f64)> {
    let ch = |gamma: f64, dim: usize| CahnHilliardSpec {
        dim,
        l_d: 5e-4,
        gamma,
        delta: 0.01,
        s: gamma,
    };
    let chns = CahnHilliardSpec {
        dim: 2,
        l_d: 5e-4,
        gamma: 0.01,
        delta: 0.02,
        s: 0.0032,
    };
    let mut out = Vec::new();
    for nu in [1e-1, 1e-2, 1e-3] {
        out.push(("taylor-green", BackwardSolution { forward: ExactSolution::TaylorGreen { nu }, horizon: 0.1 }, nu));
        out.push((
            "abc",
            BackwardSolution {
                forward: ExactSolution::Abc { a: 0.5, b: 0.5, c: 0.5, nu },
                horizon: 0.1,
            },
            nu,
        ));
    }
    for gamma in [0.5, 0.1, 0.05, 0.01] {
        for dim in [2, 50] {
            out.push(("ch-cosine", BackwardSolution { forward: ExactSolution::ChCosine { ch: ch(gamma, dim) }, horizon: 0.1 }, 0.0));
        }
    }
    out.push((
        "chns",
        BackwardSolution {
            forward: ExactSolution::Chns { nu: 1e-3, c: 1.0, ch: chns },
            horizon: 0.1,
        },
        1e-3,
    ));
    out
}

/// Run every self-check.
pub fn run_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (name, sol, nu) in benchmark_solutions() {
        let (lo, hi) = match sol.forward {
            ExactSolution::ChCosine { .. } => (-1.0, 1.0),
            _ => (0.0, 2.0 * std::f64::consts::PI),
        };
        let r = backward_residuals(&sol, nu, 100, lo, hi, seed)?;
        let label = format!("{name} (d={}, nu={nu})", sol.forward.dim());
        out.push(check(&format!("{label} backward PDE residual"), r.max_pde(), 1e-6));
        if sol.velocity(&0.0, &vec![0.0; sol.forward.dim()]).is_some() {
            out.push(check(&format!("{label} divergence"), r.divergence, 1e-10));
            out.push(check(&format!("{label} pressure gradient"), r.pressure_gradient, 1e-10));
        }
    }
    for gamma in [0.5, 0.1, 0.05, 0.01] {
        let diag = ch_diagonalize(5e-4, gamma, 0.01, gamma)?;
        let a = [[0.0, 5e-4], [-gamma * gamma / 0.01, gamma]];
        out.push(check(&format!("diagonalization gamma={gamma}"), diag.reconstruction_error(a), 1e-12));
    }
    let diag = ch_diagonalize(5e-4, 0.01, 0.02, 0.0032)?;
    out.push(check(
        "diagonalization coupled setting",
        diag.reconstruction_error([[0.0, 5e-4], [-0.005, 0.0032]]),
        1e-12,
    ));
    let zero = [0.0, 0.0];
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let v = ns_driver(&[1.0, 0.0], &eye, &zero, &zero);
    out.push(check("convection driver example", (v[0] - 1.0).abs() + v[1].abs(), 0.0));
    let v = chns_u_driver(&zero, &eye, &zero, &2.0, &[1.0, -1.0], 1.0, &zero);
    out.push(check("capillary driver example", (v[0] - 2.0).abs() + (v[1] + 2.0).abs(), 0.0));
    let spec = CahnHilliardSpec {
        dim: 2,
        l_d: 5e-4,
        gamma: 0.01,
        delta: 0.01,
        s: 0.01,
    };
    let diag = spec.diagonalize()?;
    let (a, b) = ch_driver_hat(&1.0, &0.0, &0.0, &0.0, &spec, &diag);
    out.push(check("phase driver at pure phase", a.abs() + b.abs(), 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms_satisfy_backward_equations() {
        for (name, sol, nu) in benchmark_solutions() {
            let (lo, hi) = match sol.forward {
                ExactSolution::ChCosine { .. } => (-1.0, 1.0),
                _ => (0.0, 6.3),
            };
            let r = backward_residuals(&sol, nu, 100, lo, hi, 7).unwrap();
            assert!(r.max_pde() <= 1e-6, "{name}: {r:?}");
            assert!(r.divergence <= 1e-10, "{name}: {r:?}");
            assert!(r.pressure_gradient <= 1e-10, "{name}: {r:?}");
        }
    }

    #[test]
    fn wrong_viscosity_is_detected() {
        let sol = BackwardSolution {
            forward: ExactSolution::TaylorGreen { nu: 0.1 },
            horizon: 0.1,
        };
        let r = backward_residuals(&sol, 0.2, 50, 0.0, 6.0, 1).unwrap();
        assert!(r.momentum > 1e-3);
    }

    #[test]
    fn euler_residual_shrinks_with_step() {
        let sol = BackwardSolution {
            forward: ExactSolution::TaylorGreen { nu: 0.1 },
            horizon: 0.1,
        };
        let m = euler_step_residual_medians(&sol, 0.1, &[0.02, 0.01, 0.005], 200, 1).unwrap();
        assert!(m[0] / m[1] >= 1.3 && m[1] / m[2] >= 1.3, "{m:?}");
    }

    #[test]
    fn all_checks_pass() {
        for c in run_checks(3).unwrap() {
            assert!(c.passed, "{c:?}");
        }
    }
}
