//! Fully connected solution networks, periodic input embedding and
//! hard-constraint output wrappers.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Scalar, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Cosine,
    Tanh,
}

impl Activation {
    fn apply<'t>(self, v: Var<'t>) -> Var<'t> {
        match self {
            Activation::Cosine => v.cos(),
            Activation::Tanh => v.tanh(),
        }
    }
}

/// Layer weights (`in x out`) and biases (`1 x out`) of a dense network
/// with a linear output layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ParamsRepr", try_from = "ParamsRepr")]
pub struct FnnParams {
    activation: Activation,
    dims: Vec<usize>,
    weights: Vec<Array>,
    biases: Vec<Array>,
}

#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weight: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    activation: Activation,
    dims: Vec<usize>,
    layers: Vec<LayerRepr>,
}

impl From<FnnParams> for ParamsRepr {
    fn from(p: FnnParams) -> Self {
        let layers = p
            .weights
            .into_iter()
            .zip(p.biases)
            .map(|(w, b)| LayerRepr {
                weight: w.into_data(),
                bias: b.into_data(),
            })
            .collect();
        ParamsRepr {
            activation: p.activation,
            dims: p.dims,
            layers,
        }
    }
}

impl TryFrom<ParamsRepr> for FnnParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        check_dims(&r.dims)?;
        if r.layers.len() + 1 != r.dims.len() {
            return Err(Error::Configuration(format!(
                "{} layers stored for {} layer widths",
                r.layers.len(),
                r.dims.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (l, layer) in r.layers.into_iter().enumerate() {
            weights.push(Array::new(r.dims[l], r.dims[l + 1], layer.weight)?);
            biases.push(Array::new(1, r.dims[l + 1], layer.bias)?);
        }
        Ok(FnnParams {
            activation: r.activation,
            dims: r.dims,
            weights,
            biases,
        })
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Configuration(
            "a network needs at least input and output widths".into(),
        ));
    }
    if let Some(i) = dims.iter().position(|&w| w == 0) {
        return Err(Error::Configuration(format!("layer {i} has zero width")));
    }
    Ok(())
}

/// Default hidden structure: 4 layers of 30 neurons.
pub const DEFAULT_HIDDEN: [usize; 4] = [30, 30, 30, 30];

/// Gaussian weights with variance `1 / fan_in`, zero biases.
///
/// `dims` lists every layer width from input to output.
pub fn init_network(seed: u64, dims: &[usize], activation: Activation) -> Result<FnnParams> {
    check_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
        let data = (0..fan_in * fan_out).map(|_| normal.sample(&mut rng)).collect();
        weights.push(Array::new(fan_in, fan_out, data)?);
        biases.push(Array::zeros(1, fan_out));
    }
    Ok(FnnParams {
        activation,
        dims: dims.to_vec(),
        weights,
        biases,
    })
}

/// Parameters bound to a tape for one loss evaluation.
pub struct BoundParams<'t> {
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundParams<'t> {
    /// Weight and bias variables in the order of [`FnnParams::flat`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

impl FnnParams {
    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        self.dims[self.dims.len() - 1]
    }

    /// Hidden layer widths.
    pub fn hidden(&self) -> &[usize] {
        &self.dims[1..self.dims.len() - 1]
    }

    pub fn weight(&self, layer: usize) -> &Array {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Array {
        &self.biases[layer]
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    /// All parameters, layer by layer, weight (row-major) before bias.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    pub fn set_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Configuration(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut pos = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for a in [w, b] {
                let n = a.len();
                a.data_mut().copy_from_slice(&values[pos..pos + n]);
                pos += n;
            }
        }
        Ok(())
    }

    /// Record the parameters as differentiable leaves (or constants).
    pub fn bind<'t>(&self, tape: &'t Tape, differentiable: bool) -> BoundParams<'t> {
        let leaf = |a: &Array| {
            if differentiable {
                tape.var(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        BoundParams {
            layers: self.weights.iter().zip(&self.biases).map(|(w, b)| (leaf(w), leaf(b))).collect(),
        }
    }

    /// Raw network output for a batch of inputs (`B x input_dim`).
    pub fn apply<'t>(&self, bound: &BoundParams<'t>, input: Var<'t>) -> Result<Var<'t>> {
        if input.cols() != self.input_dim() {
            return Err(Error::Configuration(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.cols()
            )));
        }
        let ones = input.tape().constant(Array::filled(input.rows(), 1, 1.0));
        let last = bound.layers.len() - 1;
        let mut h = input;
        for (l, (w, b)) in bound.layers.iter().enumerate() {
            let z = h.matmul(w)?.add(&ones.matmul(b)?)?;
            h = if l == last { z } else { self.activation.apply(z) };
        }
        Ok(h)
    }
}

/// Trigonometric features `sin(j 2π x_i / I_i)`, `cos(j 2π x_i / I_i)`.
///
/// Features are ordered by coordinate, then by `j = 1..=J`, with the sine
/// before the cosine: `(s_11, c_11, s_12, c_12, .., s_21, c_21, ..)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicEmbedding {
    periods: Vec<f64>,
    order: usize,
}

impl PeriodicEmbedding {
    pub fn new(periods: Vec<f64>, order: usize) -> Result<Self> {
        if let Some(p) = periods.iter().find(|p| !(**p > 0.0 && p.is_finite())) {
            return Err(Error::Configuration(format!("period {p} must be positive")));
        }
        if order == 0 {
            return Err(Error::Configuration("embedding order must be at least 1".into()));
        }
        Ok(Self { periods, order })
    }

    pub fn periods(&self) -> &[f64] {
        &self.periods
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.periods.len()
    }

    pub fn width(&self) -> usize {
        2 * self.order * self.periods.len()
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim() {
            return Err(Error::Configuration(format!(
                "embedding expects {} coordinates, got {}",
                self.dim(),
                x.len()
            )));
        }
        let mut out = Vec::with_capacity(self.width());
        for (xi, p) in x.iter().zip(&self.periods) {
            for j in 1..=self.order {
                let a = j as f64 * std::f64::consts::TAU * xi / p;
                out.push(a.sin());
                out.push(a.cos());
            }
        }
        Ok(out)
    }

    /// Embedding of a batch `B x d`, differentiable in `x`.
    pub fn embed_var<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.dim() {
            return Err(Error::Configuration(format!(
                "embedding expects {} coordinates, got {}",
                self.dim(),
                x.cols()
            )));
        }
        let mut parts = Vec::with_capacity(self.width());
        for (i, p) in self.periods.iter().enumerate() {
            let xi = x.col(i)?;
            for j in 1..=self.order {
                let a = xi.scale(j as f64 * std::f64::consts::TAU / p);
                parts.push(a.sin());
                parts.push(a.cos());
            }
        }
        Var::concat(&parts)
    }
}

/// Multiplicative output factors that enforce homogeneous velocity data on
/// part of the boundary.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputWrapper {
    #[default]
    None,
    /// Unit square: `Y¹·8x₁(x₁−1)x₂`, `Y²·8x₁(x₁−1)x₂(x₂−1)`.
    Cavity,
    /// Channel `(−2,10)×(−2,2)` around the disk of radius 1/2:
    /// `Y¹·8(r²−¼)/r²`, `Y²·8(r²−¼)(x₁+2)(x₂−2)(x₂+2)/r²`.
    Obstacle,
}

/// Factors for the first two outputs.
pub fn wrapper_factors<S: Scalar>(kind: OutputWrapper, x1: &S, x2: &S) -> Option<(S, S)> {
    match kind {
        OutputWrapper::None => None,
        OutputWrapper::Cavity => {
            let a = x1.mul(&x1.shift(-1.0)).mul(x2).scale(8.0);
            let b = a.mul(&x2.shift(-1.0));
            Some((a, b))
        }
        OutputWrapper::Obstacle => {
            let r2 = x1.mul(x1).add(&x2.mul(x2));
            let a = r2.shift(-0.25).mul(&r2.powi(-1)).scale(8.0);
            let b = a
                .mul(&x1.shift(2.0))
                .mul(&x2.shift(-2.0))
                .mul(&x2.shift(2.0));
            Some((a, b))
        }
    }
}

impl OutputWrapper {
    fn check(self, x: &[f64]) -> Result<()> {
        match self {
            OutputWrapper::None => Ok(()),
            _ if x.len() != 2 => Err(Error::Configuration(format!(
                "{self:?} wrapper needs d = 2, got {}",
                x.len()
            ))),
            OutputWrapper::Obstacle if x[0] == 0.0 && x[1] == 0.0 => Err(Error::Domain(
                "obstacle wrapper is undefined at the origin".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Apply to raw outputs at one point.
    pub fn apply(self, raw: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut out = raw.to_vec();
        if let Some((a, b)) = wrapper_factors(self, &x[0], &x[1]) {
            if raw.len() < 2 {
                return Err(Error::Configuration("wrapper needs two velocity outputs".into()));
            }
            out[0] *= a;
            out[1] *= b;
        }
        Ok(out)
    }

    /// Apply to a batch of raw outputs `B x m` at points `x` (`B x 2`).
    pub fn apply_var<'t>(self, raw: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if self == OutputWrapper::None {
            return Ok(raw);
        }
        if x.cols() != 2 || raw.cols() < 2 {
            return Err(Error::Configuration(format!(
                "{self:?} wrapper needs d = 2 and two velocity outputs"
            )));
        }
        for r in 0..x.rows() {
            x.with_value(|v| self.check(v.row_slice(r)))?;
        }
        let (a, b) = wrapper_factors(self, &x.col(0)?, &x.col(1)?).expect("wrapper kind");
        let mut cols = vec![raw.col(0)?.mul(&a)?, raw.col(1)?.mul(&b)?];
        if raw.cols() > 2 {
            cols.push(raw.select(0, raw.rows(), 2, raw.cols() - 2)?);
        }
        Var::concat(&cols)
    }
}

/// A solution network: parameters together with its input map and output
/// wrapper. Inputs are `(t, x)` with `t` never embedded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub params: FnnParams,
    pub space_dim: usize,
    #[serde(default)]
    pub embedding: Option<PeriodicEmbedding>,
    #[serde(default)]
    pub wrapper: OutputWrapper,
}

impl Network {
    pub fn new(
        params: FnnParams,
        space_dim: usize,
        embedding: Option<PeriodicEmbedding>,
        wrapper: OutputWrapper,
    ) -> Result<Self> {
        let feature = match &embedding {
            Some(e) if e.dim() != space_dim => {
                return Err(Error::Configuration(format!(
                    "embedding covers {} coordinates but d = {space_dim}",
                    e.dim()
                )))
            }
            Some(e) => e.width(),
            None => space_dim,
        };
        if params.input_dim() != feature + 1 {
            return Err(Error::Configuration(format!(
                "network input width {} does not match 1 + {feature}",
                params.input_dim()
            )));
        }
        if wrapper != OutputWrapper::None && (space_dim != 2 || params.output_dim() < 2) {
            return Err(Error::Configuration(format!(
                "{wrapper:?} wrapper needs d = 2 and two velocity outputs"
            )));
        }
        Ok(Self {
            params,
            space_dim,
            embedding,
            wrapper,
        })
    }

    /// Fresh network whose input width follows `space_dim` and `embedding`.
    pub fn init(
        seed: u64,
        space_dim: usize,
        hidden: &[usize],
        outputs: usize,
        activation: Activation,
        embedding: Option<PeriodicEmbedding>,
        wrapper: OutputWrapper,
    ) -> Result<Self> {
        let feature = embedding.as_ref().map_or(space_dim, PeriodicEmbedding::width);
        let mut dims = vec![feature + 1];
        dims.extend_from_slice(hidden);
        dims.push(outputs);
        let params = init_network(seed, &dims, activation)?;
        Self::new(params, space_dim, embedding, wrapper)
    }

    pub fn outputs(&self) -> usize {
        self.params.output_dim()
    }

    /// Outputs for `B` points: `t` is `B x 1`, `x` is `B x d`.
    pub fn forward<'t>(&self, bound: &BoundParams<'t>, t: Var<'t>, x: Var<'t>) -> Result<Var<'t>> {
        if x.cols() != self.space_dim || t.cols() != 1 || t.rows() != x.rows() {
            return Err(Error::Configuration(format!(
                "forward expects t: Bx1 and x: Bx{}, got {}x{} and {}x{}",
                self.space_dim,
                t.rows(),
                t.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let features = match &self.embedding {
            Some(e) => e.embed_var(x)?,
            None => x,
        };
        let input = Var::concat(&[t, features])?;
        let raw = self.params.apply(bound, input)?;
        self.wrapper.apply_var(raw, x)
    }

    /// Numeric outputs for a batch of points (`x` is `B x d`).
    pub fn evaluate(&self, t: &[f64], x: &Array) -> Result<Array> {
        let tape = Tape::new();
        let bound = self.params.bind(&tape, false);
        let tv = tape.constant(Array::column(t.to_vec()));
        let xv = tape.constant(x.clone());
        Ok(self.forward(&bound, tv, xv)?.value())
    }

    pub fn forward_point(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let xa = Array::new(1, x.len(), x.to_vec())?;
        Ok(self.evaluate(&[t], &xa)?.into_data())
    }
}

const CHECKPOINT_FORMAT: &str = "fbsnn-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Networks plus free-form metadata, stored as versioned JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub networks: Vec<Network>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

impl Checkpoint {
    pub fn new(networks: Vec<Network>, metadata: serde_json::Value) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            networks,
            metadata,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(Error::Configuration(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let a = init_network(3, &[3, 30, 30, 30, 30, 3], Activation::Cosine).unwrap();
        let b = init_network(3, &[3, 30, 30, 30, 30, 3], Activation::Cosine).unwrap();
        assert_eq!(a.flat(), b.flat());
        assert_eq!(a.hidden(), &DEFAULT_HIDDEN);
        assert_ne!(a.flat(), init_network(4, a.dims(), Activation::Cosine).unwrap().flat());
    }

    #[test]
    fn zero_width_rejected() {
        assert!(init_network(0, &[3, 0, 2], Activation::Tanh).is_err());
    }

    #[test]
    fn zero_network_returns_bias() {
        let mut p = init_network(1, &[3, 4, 2], Activation::Cosine).unwrap();
        let mut flat = vec![0.0; p.num_params()];
        let n = flat.len();
        flat[n - 2] = 0.7;
        flat[n - 1] = -1.3;
        p.set_flat(&flat).unwrap();
        let net = Network::new(p, 2, None, OutputWrapper::None).unwrap();
        assert_eq!(net.forward_point(0.4, &[1.0, 2.0]).unwrap(), vec![0.7, -1.3]);
    }

    #[test]
    fn embedding_examples() {
        let e = PeriodicEmbedding::new(vec![4.0], 1).unwrap();
        assert_eq!(e.embed(&[0.0]).unwrap(), vec![0.0, 1.0]);
        let q = e.embed(&[1.0]).unwrap();
        assert!((q[0] - 1.0).abs() < 1e-15 && q[1].abs() < 1e-15);
        let e2 = PeriodicEmbedding::new(vec![8.0], 2).unwrap();
        let v = e2.embed(&[1.0]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        for (a, b) in v.iter().zip([h, h, 1.0, 0.0]) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(PeriodicEmbedding::new(vec![0.0], 1).is_err());
        assert!(PeriodicEmbedding::new(vec![-1.0], 1).is_err());
    }

    #[test]
    fn wrapper_examples() {
        let c = OutputWrapper::Cavity.apply(&[1.0, 1.0], &[0.5, 0.5]).unwrap();
        assert_eq!(c, vec![-1.0, 0.5]);
        assert_eq!(OutputWrapper::Cavity.apply(&[3.0, 2.0], &[0.0, 0.5]).unwrap(), vec![0.0, 0.0]);
        let o = OutputWrapper::Obstacle.apply(&[1.0, 1.0, 5.0], &[1.0, 0.0]).unwrap();
        assert_eq!(o, vec![6.0, -72.0, 5.0]);
        assert!(matches!(
            OutputWrapper::Obstacle.apply(&[1.0, 1.0], &[0.0, 0.0]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let net = Network::init(
            9,
            2,
            &[5, 5],
            3,
            Activation::Tanh,
            Some(PeriodicEmbedding::new(vec![1.5, 2.5], 1).unwrap()),
            OutputWrapper::None,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        Checkpoint::new(vec![net.clone()], serde_json::json!({"k": 1})).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.networks[0], net);
    }
}
