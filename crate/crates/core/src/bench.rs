//! Benchmark experiments: default settings per experiment id, multi-seed
//! runs, metric reports and field snapshots.

use std::f64::consts::PI;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::fnn::{Activation, Checkpoint};
use crate::metrics::median;
use crate::problems::{BoundaryKind, BoundarySpec, Problem, ProblemConfig};
use crate::sde::{Geometry, TimeGrid};
use crate::trainer::{
    evaluate, test_points, train, write_history_csv, LossWeights, Model, ModelConfig, TrainOptions, TrainSchedule,
};

pub const EXPERIMENT_IDS: [&str; 11] = [
    "tg2d",
    "abc3d",
    "tg2d-dirichlet",
    "tg2d-neumann",
    "cavity",
    "obstacle",
    "ch-freespace",
    "ch-mixed",
    "ch-periodic",
    "chns-exact",
    "chns-bubbles",
];

/// Fully resolved settings of one experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub id: String,
    pub problem: ProblemConfig,
    /// Number of time steps `N`.
    pub steps: usize,
    pub weights: LossWeights,
    pub schedule: TrainSchedule,
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub options: TrainOptions,
    /// Test points of the final metrics.
    pub test_points: usize,
    /// Grid points per axis of the field snapshots.
    pub snapshot_grid: usize,
    /// Physical times of the field snapshots.
    pub snapshot_times: Vec<f64>,
}

/// Optional overrides read from `--config`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentOverrides {
    pub dim: Option<usize>,
    pub nu: Option<f64>,
    pub gamma: Option<f64>,
    pub s: Option<f64>,
    pub horizon: Option<f64>,
    /// Time step; sets `N = T/dt` (and `δ = dt` for phase-field problems).
    pub dt: Option<f64>,
    pub steps: Option<usize>,
    pub batch: Option<usize>,
    /// Total iterations, distributed over the four segments proportionally.
    pub iterations: Option<usize>,
    pub schedule: Option<TrainSchedule>,
    pub weights: Option<LossWeights>,
    pub seeds: Option<Vec<u64>>,
    pub hidden: Option<Vec<usize>>,
    pub test_points: Option<usize>,
    pub eval_every: Option<usize>,
    pub eval_points: Option<usize>,
    pub curriculum: Option<f64>,
    pub mass_levels: Option<usize>,
    pub snapshot_grid: Option<usize>,
    pub snapshot_times: Option<Vec<f64>>,
}

fn cube(dim: usize, lo: f64, hi: f64) -> Geometry {
    Geometry::Box {
        lo: vec![lo; dim],
        hi: vec![hi; dim],
    }
}

fn boundary(kind: BoundaryKind, geometry: Geometry) -> BoundarySpec {
    BoundarySpec {
        kind,
        geometry,
        reflect_parts: Vec::new(),
        periods: None,
    }
}

fn base_problem(problem: &str, dim: usize, horizon: f64, domain: Geometry, b: BoundarySpec) -> ProblemConfig {
    ProblemConfig {
        problem: problem.into(),
        dim,
        horizon,
        nu: None,
        l_d: None,
        gamma: None,
        delta: None,
        s: None,
        c: None,
        boundary: b,
        domain,
        exact: None,
        data: None,
        u_in: None,
        radius: None,
        abc: None,
    }
}

/// Parse `ch-freespace(50, 0.01)` style ids into the base id and its
/// `(d, γ)` arguments.
pub fn parse_id(id: &str) -> Result<(String, Option<usize>, Option<f64>)> {
    let unknown = || {
        Error::Usage(format!(
            "unknown experiment `{id}`; expected one of: {}",
            EXPERIMENT_IDS.join(", ")
        ))
    };
    let (base, args) = match id.find('(') {
        Some(i) => {
            let inner = id[i + 1..].strip_suffix(')').ok_or_else(unknown)?;
            (id[..i].trim(), Some(inner))
        }
        None => (id.trim(), None),
    };
    if !EXPERIMENT_IDS.contains(&base) {
        return Err(unknown());
    }
    let (mut dim, mut gamma) = (None, None);
    if let Some(args) = args {
        if !matches!(base, "ch-freespace" | "ch-mixed") {
            return Err(Error::Usage(format!("`{base}` takes no arguments")));
        }
        let parts: Vec<&str> = args.split(',').map(str::trim).collect();
        if parts.len() != 2 {
            return Err(Error::Usage(format!("`{base}` takes (d, gamma), got `{args}`")));
        }
        dim = Some(parts[0].parse().map_err(|_| Error::Usage(format!("bad dimension `{}`", parts[0])))?);
        gamma = Some(parts[1].parse().map_err(|_| Error::Usage(format!("bad gamma `{}`", parts[1])))?);
    }
    Ok((base.to_string(), dim, gamma))
}

impl ExperimentConfig {
    /// Default desk-scale settings of an experiment id.
    pub fn for_id(id: &str) -> Result<Self> {
        let (base, dim_arg, gamma_arg) = parse_id(id)?;
        let tau = 2.0 * PI;
        let mut steps = 5;
        let mut weights = LossWeights::new(0.1, 0.1, 0.0)?;
        let mut model = ModelConfig::default();
        let mut options = TrainOptions::default();
        let mut snapshot_times = vec![0.0];
        let problem = match base.as_str() {
            "tg2d" | "tg2d-dirichlet" | "tg2d-neumann" => {
                let domain = cube(2, 0.0, tau);
                let b = match base.as_str() {
                    "tg2d" => BoundarySpec::whole_space(2),
                    "tg2d-dirichlet" => boundary(BoundaryKind::Dirichlet, domain.clone()),
                    _ => boundary(BoundaryKind::Neumann, domain.clone()),
                };
                let mut p = base_problem("ns", 2, 0.1, domain, b);
                p.nu = Some(0.1);
                p.exact = Some("taylor-green".into());
                p
            }
            "abc3d" => {
                let mut p = base_problem("ns", 3, 0.1, cube(3, 0.0, tau), BoundarySpec::whole_space(3));
                p.nu = Some(0.1);
                p.exact = Some("abc".into());
                p.abc = Some([0.5, 0.5, 0.5]);
                p
            }
            "cavity" => {
                let domain = cube(2, 0.0, 1.0);
                let mut p = base_problem("ns", 2, 0.5, domain.clone(), boundary(BoundaryKind::Dirichlet, domain));
                p.nu = Some(0.1);
                p.data = Some("cavity".into());
                steps = 25;
                weights = LossWeights::new(0.01, 0.01, 0.01)?;
                options.curriculum = Some(0.25);
                snapshot_times = vec![0.5];
                p
            }
            "obstacle" => {
                let domain = Geometry::BoxMinusDisk {
                    lo: vec![-2.0, -2.0],
                    hi: vec![10.0, 2.0],
                    center: vec![0.0, 0.0],
                    radius: 0.5,
                };
                let mut b = boundary(BoundaryKind::Dirichlet, domain.clone());
                b.reflect_parts = vec![1];
                let mut p = base_problem("ns", 2, 1.0, domain, b);
                p.nu = Some(0.025);
                p.u_in = Some(3.0);
                p.data = Some("obstacle".into());
                steps = 50;
                weights = LossWeights::new(0.01, 0.01, 0.01)?;
                options.curriculum = Some(0.25);
                snapshot_times = vec![1.0];
                p
            }
            "ch-freespace" | "ch-mixed" | "ch-periodic" => {
                let dim = if base == "ch-periodic" { 2 } else { dim_arg.unwrap_or(2) };
                let gamma = gamma_arg.unwrap_or(0.1);
                let mut p = match base.as_str() {
                    "ch-freespace" => base_problem("ch", dim, 0.1, cube(dim, -1.0, 1.0), BoundarySpec::whole_space(dim)),
                    "ch-mixed" => {
                        let ball = Geometry::Ball {
                            center: vec![0.0; dim],
                            radius: 1.0,
                        };
                        weights = LossWeights::new(1.0, 0.0, 0.0)?;
                        base_problem("ch", dim, 0.1, ball.clone(), boundary(BoundaryKind::Mixed, ball))
                    }
                    _ => {
                        let r = 2f64.sqrt();
                        let domain = cube(2, -r, r);
                        let mut b = boundary(BoundaryKind::Mixed, domain.clone());
                        b.periods = Some(vec![2.0 * r; 2]);
                        weights = LossWeights::new(1.0, 0.0, 0.0)?;
                        base_problem("ch", 2, 0.1, domain, b)
                    }
                };
                if base == "ch-freespace" {
                    weights = LossWeights::new(0.01, 0.0, 0.0)?;
                }
                p.l_d = Some(5e-4);
                p.gamma = Some(gamma);
                p.s = Some(gamma);
                p.delta = Some(0.01);
                p.exact = Some("ch-cosine".into());
                steps = 10;
                p
            }
            "chns-exact" => {
                let mut p = base_problem("chns", 2, 0.1, cube(2, 0.0, tau), BoundarySpec::whole_space(2));
                p.nu = Some(1e-3);
                p.c = Some(1.0);
                p.l_d = Some(5e-4);
                p.gamma = Some(0.01);
                p.s = Some(0.0032);
                p.delta = Some(0.02);
                p.exact = Some("chns".into());
                weights = LossWeights::new(0.01, 0.01, 0.01)?;
                p
            }
            "chns-bubbles" => {
                let domain = cube(2, -1.0, 1.0);
                let mut b = boundary(BoundaryKind::Periodic, Geometry::Whole { dim: 2 });
                b.periods = Some(vec![2.0, 2.0]);
                let mut p = base_problem("chns", 2, 3.0, domain, b);
                p.nu = Some(1.0);
                p.c = Some(10.0);
                p.l_d = Some(1.0);
                p.gamma = Some(0.03);
                p.s = Some(3.3);
                p.delta = Some(0.01);
                p.radius = Some(0.4);
                p.data = Some("bubbles".into());
                steps = 300;
                weights = LossWeights::new(0.01, 0.01, 0.01)?;
                model.phase_activation = Activation::Tanh;
                options.curriculum = Some(0.25);
                snapshot_times = vec![0.0, 0.2, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];
                p
            }
            _ => unreachable!("validated by parse_id"),
        };
        Ok(Self {
            id: id.to_string(),
            problem,
            steps,
            weights,
            schedule: TrainSchedule::desk(),
            seeds: vec![0, 1, 2],
            model,
            options,
            test_points: 10_000,
            snapshot_grid: 33,
            snapshot_times,
        })
    }

    pub fn apply(&mut self, o: &ExperimentOverrides) -> Result<()> {
        let p = &mut self.problem;
        if let Some(dim) = o.dim {
            if p.dim != dim {
                p.dim = dim;
                let resize = |g: &mut Geometry| match g {
                    Geometry::Whole { dim: d } => *d = dim,
                    Geometry::Box { lo, hi } => {
                        *lo = vec![lo[0]; dim];
                        *hi = vec![hi[0]; dim];
                    }
                    Geometry::Ball { center, .. } => *center = vec![center[0]; dim],
                    Geometry::BoxMinusDisk { .. } => {}
                };
                resize(&mut p.domain);
                resize(&mut p.boundary.geometry);
                if let Some(per) = &mut p.boundary.periods {
                    *per = vec![per[0]; dim];
                }
            }
        }
        if o.nu.is_some() {
            p.nu = o.nu;
        }
        if let Some(g) = o.gamma {
            p.gamma = Some(g);
            if o.s.is_none() && self.id.starts_with("ch-") {
                p.s = Some(g);
            }
        }
        if o.s.is_some() {
            p.s = o.s;
        }
        if let Some(h) = o.horizon {
            p.horizon = h;
        }
        if let Some(n) = o.steps {
            self.steps = n;
        }
        if let Some(dt) = o.dt {
            if !(dt > 0.0) {
                return Err(Error::Configuration(format!("dt must be positive, got {dt}")));
            }
            self.steps = (p.horizon / dt).round().max(1.0) as usize;
        }
        if p.delta.is_some() && (o.dt.is_some() || o.steps.is_some() || o.horizon.is_some()) {
            p.delta = Some(p.horizon / self.steps as f64);
        }
        if let Some(s) = &o.schedule {
            self.schedule = s.clone();
        }
        if let Some(n) = o.iterations {
            let batch = self.schedule.batch;
            self.schedule = TrainSchedule::scaled(n);
            self.schedule.batch = batch;
        }
        if let Some(k) = o.batch {
            self.schedule.batch = k;
        }
        if let Some(w) = o.weights {
            self.weights = w;
        }
        if let Some(s) = &o.seeds {
            self.seeds = s.clone();
        }
        if let Some(h) = &o.hidden {
            self.model.hidden = h.clone();
        }
        if let Some(n) = o.test_points {
            self.test_points = n;
        }
        if let Some(n) = o.eval_every {
            self.options.eval_every = n;
        }
        if let Some(n) = o.eval_points {
            self.options.eval_points = n;
        }
        if let Some(c) = o.curriculum {
            self.options.curriculum = Some(c);
        }
        if let Some(m) = o.mass_levels {
            self.options.mass_levels = m;
        }
        if let Some(g) = o.snapshot_grid {
            self.snapshot_grid = g;
        }
        if let Some(t) = &o.snapshot_times {
            self.snapshot_times = t.clone();
        }
        Ok(())
    }

    /// Paper-scale schedule of 1e5 iterations.
    pub fn full_budget(&mut self) {
        let batch = self.schedule.batch;
        self.schedule = TrainSchedule::full();
        self.schedule.batch = batch;
    }

    pub fn build(&self) -> Result<(Problem, TimeGrid)> {
        let problem = self.problem.build()?;
        let grid = TimeGrid::new(problem.horizon, self.steps)?;
        problem.validate(&grid)?;
        self.schedule.validate()?;
        self.weights.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Configuration("at least one seed required".into()));
        }
        Ok((problem, grid))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentError {
    pub component: String,
    pub rel_linf: f64,
    pub rel_l2: f64,
    /// Errors are absolute because the exact field vanishes on the test set.
    pub absolute: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub errors: Vec<ComponentError>,
    pub velocity_rel_l2: Option<f64>,
    pub grad_p_rel_l2: Option<f64>,
    pub initial_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub experiment: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub iterations: usize,
    pub test_points: usize,
    /// Medians over seeds.
    pub errors: Vec<ComponentError>,
    pub velocity_rel_l2: Option<f64>,
    pub grad_p_rel_l2: Option<f64>,
    pub wall_clock_seconds: f64,
    pub per_seed: Vec<SeedReport>,
}

impl MetricsReport {
    pub fn rel_l2(&self, component: &str) -> Option<f64> {
        self.errors.iter().find(|e| e.component == component).map(|e| e.rel_l2)
    }
}

fn median_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| median(&v))
}

/// Train every seed, evaluate and write the report, loss histories,
/// checkpoints and field snapshots under `out` (when given).
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<MetricsReport> {
    let (problem, grid) = config.build()?;
    let hash = config.hash()?;
    let started = Instant::now();
    let points = test_points(&problem, config.test_points)?;
    let mut per_seed = Vec::new();
    for &seed in &config.seeds {
        let seed_dir = out.map(|o| o.join(format!("seed_{seed}")));
        let mut options = config.options.clone();
        options.checkpoint_dir = seed_dir.clone();
        let mut model = Model::new(problem.clone(), grid, &config.model, seed)?;
        let outcome = train(&mut model, &config.schedule, &config.weights, seed, &options)?;
        let eval = evaluate(&model, &points)?;
        let errors = eval
            .as_ref()
            .map(|e| {
                e.components
                    .iter()
                    .zip(&e.errors)
                    .map(|(c, r)| ComponentError {
                        component: c.clone(),
                        rel_linf: r.linf,
                        rel_l2: r.l2,
                        absolute: r.absolute,
                    })
                    .collect()
            })
            .unwrap_or_default();
        if let Some(dir) = &seed_dir {
            std::fs::create_dir_all(dir)?;
            write_history_csv(std::fs::File::create(dir.join("loss.csv"))?, &outcome)?;
            let meta = serde_json::json!({
                "experiment": config.id,
                "seed": seed,
                "problem": problem,
                "steps": config.steps,
            });
            Checkpoint::new(model.networks.clone(), meta).save(&dir.join("checkpoint.json"))?;
            let fields = emit_fields(&model, config.snapshot_grid, &config.snapshot_times, Frame::Physical)?;
            fields.write_csv(std::fs::File::create(dir.join("fields.csv"))?)?;
        }
        per_seed.push(SeedReport {
            seed,
            errors,
            velocity_rel_l2: eval.as_ref().and_then(|e| e.velocity.as_ref().map(|r| r.l2)),
            grad_p_rel_l2: eval.as_ref().and_then(|e| e.grad_p.as_ref().map(|r| r.l2)),
            initial_loss: outcome.history.first().map(|h| h.loss.total),
            final_loss: outcome.history.last().map(|h| h.loss.total),
            wall_clock_seconds: outcome.seconds,
        });
    }
    let errors = match per_seed.first() {
        Some(first) => first
            .errors
            .iter()
            .enumerate()
            .map(|(i, e)| ComponentError {
                component: e.component.clone(),
                rel_linf: median(&per_seed.iter().map(|s| s.errors[i].rel_linf).collect::<Vec<_>>()),
                rel_l2: median(&per_seed.iter().map(|s| s.errors[i].rel_l2).collect::<Vec<_>>()),
                absolute: e.absolute,
            })
            .collect(),
        None => Vec::new(),
    };
    let report = MetricsReport {
        experiment: config.id.clone(),
        config_hash: hash,
        seeds: config.seeds.clone(),
        iterations: config.schedule.total_iterations(),
        test_points: config.test_points,
        errors,
        velocity_rel_l2: median_opt(per_seed.iter().map(|s| s.velocity_rel_l2)),
        grad_p_rel_l2: median_opt(per_seed.iter().map(|s| s.grad_p_rel_l2)),
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        per_seed,
    };
    if let Some(o) = out {
        std::fs::create_dir_all(o)?;
        std::fs::write(o.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        std::fs::write(o.join("config.json"), serde_json::to_string_pretty(config)?)?;
    }
    Ok(report)
}

/// Time convention of field snapshots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Frame {
    /// Raw network outputs at the given network times.
    Network,
    /// Physical fields: outputs at `T − t` with velocity, phase and
    /// potential negated.
    Physical,
}

/// Grid samples of all network outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FieldTable {
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{}", self.header.join(","))?;
        for row in &self.rows {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

fn bounding_box(g: &Geometry) -> Result<(Vec<f64>, Vec<f64>)> {
    match g {
        Geometry::Box { lo, hi } | Geometry::BoxMinusDisk { lo, hi, .. } => Ok((lo.clone(), hi.clone())),
        Geometry::Ball { center, radius } => Ok((
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
        )),
        Geometry::Whole { .. } => Err(Error::Configuration("field grid needs a bounded domain".into())),
    }
}

/// Grid points: `n` per axis over the first three coordinates of the
/// domain's bounding box, the remaining coordinates at the box centre.
pub fn grid_points(domain: &Geometry, n: usize) -> Result<Array> {
    if n == 0 {
        return Err(Error::Configuration("grid needs at least one point per axis".into()));
    }
    let (lo, hi) = bounding_box(domain)?;
    let d = lo.len();
    let axes = d.min(3);
    let coord = |i: usize, j: usize| {
        if n == 1 {
            0.5 * (lo[i] + hi[i])
        } else {
            lo[i] + (hi[i] - lo[i]) * j as f64 / (n - 1) as f64
        }
    };
    let total = n.pow(axes as u32);
    let mut data = Vec::with_capacity(total * d);
    for idx in 0..total {
        let mut rem = idx;
        let mut digits = vec![0; axes];
        for a in (0..axes).rev() {
            digits[a] = rem % n;
            rem /= n;
        }
        for i in 0..d {
            data.push(if i < axes { coord(i, digits[i]) } else { 0.5 * (lo[i] + hi[i]) });
        }
    }
    Array::new(total, d, data)
}

fn output_names(model: &Model) -> Vec<String> {
    let d = model.problem.kind.dim();
    let mut names = Vec::new();
    if model.velocity_net().is_some() {
        names.extend((1..=d).map(|i| format!("u{i}")));
        names.push("p".into());
    }
    if model.phase_net().is_some() {
        names.push("phi".into());
        names.push("mu".into());
    }
    names
}

/// Rows `(t, x₁..x_d, outputs...)` for every time and grid point.
pub fn emit_fields(model: &Model, grid: usize, times: &[f64], frame: Frame) -> Result<FieldTable> {
    let pts = grid_points(&model.problem.domain, grid)?;
    let d = pts.cols();
    let horizon = model.problem.horizon;
    let mut header = vec!["t".to_string()];
    header.extend((1..=d).map(|i| format!("x{i}")));
    header.extend(output_names(model));
    let mut rows = Vec::with_capacity(times.len() * pts.rows());
    for &t in times {
        let net_t = match frame {
            Frame::Network => t,
            Frame::Physical => horizon - t,
        };
        let mut outputs: Vec<Array> = Vec::new();
        let mut negate: Vec<bool> = Vec::new();
        if let Some(net) = model.velocity_net() {
            outputs.push(net.evaluate(&vec![net_t; pts.rows()], &pts)?);
            negate.extend((0..d).map(|_| true));
            negate.push(false);
        }
        if let Some(net) = model.phase_net() {
            outputs.push(net.evaluate(&vec![net_t; pts.rows()], &pts)?);
            negate.extend([true, true]);
        }
        for r in 0..pts.rows() {
            let mut row = Vec::with_capacity(header.len());
            row.push(t);
            row.extend_from_slice(pts.row_slice(r));
            for o in &outputs {
                row.extend_from_slice(o.row_slice(r));
            }
            if frame == Frame::Physical {
                for (v, neg) in row[1 + d..].iter_mut().zip(&negate) {
                    if *neg {
                        *v = -*v;
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(FieldTable { header, rows })
}

/// Rebuild a model from a checkpoint written by [`run_experiment`].
pub fn model_from_checkpoint(path: &Path) -> Result<Model> {
    let ck = Checkpoint::load(path)?;
    let problem: Problem = serde_json::from_value(
        ck.metadata
            .get("problem")
            .cloned()
            .ok_or_else(|| Error::Configuration("checkpoint has no problem metadata".into()))?,
    )?;
    let steps = ck
        .metadata
        .get("steps")
        .and_then(|v| v.as_u64())
        .map(|v| v as usize)
        .unwrap_or(1);
    let grid = TimeGrid::new(problem.horizon, steps)?;
    Model::from_networks(problem, grid, ck.networks)
}

/// Default output directory of an experiment.
pub fn default_out(id: &str) -> PathBuf {
    let clean: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect();
    PathBuf::from("runs").join(clean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_id_builds() {
        for id in EXPERIMENT_IDS {
            let c = ExperimentConfig::for_id(id).unwrap();
            c.build().unwrap_or_else(|e| panic!("{id}: {e}"));
        }
        for id in ["ch-freespace(50, 0.01)", "ch-mixed(2,0.5)"] {
            ExperimentConfig::for_id(id).unwrap().build().unwrap();
        }
    }

    #[test]
    fn unknown_id_lists_choices() {
        let err = ExperimentConfig::for_id("tg4d").unwrap_err().to_string();
        assert!(err.contains("tg2d-neumann") && err.contains("chns-bubbles"), "{err}");
    }

    #[test]
    fn overrides_keep_stabilized_scheme_consistent() {
        let mut c = ExperimentConfig::for_id("ch-freespace").unwrap();
        let o: ExperimentOverrides = serde_json::from_str(r#"{"dt": 0.02, "gamma": 0.5, "iterations": 10}"#).unwrap();
        c.apply(&o).unwrap();
        assert_eq!(c.steps, 5);
        assert_eq!(c.problem.delta, Some(0.02));
        assert_eq!(c.problem.s, Some(0.5));
        assert_eq!(c.schedule.total_iterations(), 10);
        c.build().unwrap();
    }

    #[test]
    fn grid_shape() {
        let g = grid_points(&cube(2, 0.0, 1.0), 2).unwrap();
        assert_eq!((g.rows(), g.cols()), (4, 2));
        assert_eq!(g.row_slice(3), &[1.0, 1.0]);
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::for_id("tg2d").unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seeds = vec![7];
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 64);
    }
}
