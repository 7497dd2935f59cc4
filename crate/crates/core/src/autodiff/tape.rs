use std::cell::RefCell;
use std::rc::Rc;

use super::array::Array;
use crate::error::{Error, Result};

/// Primitive operations that can be recorded on a [`Tape`].
///
/// Elementwise binary ops accept equal shapes, or a `1 x 1` operand against
/// an array of any shape. No other broadcasting is performed; row-wise bias
/// terms are expressed as a matmul with a column of ones.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    /// `op(a) * op(b)` where `op` optionally transposes.
    MatMul { ta: bool, tb: bool },
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    /// Multiplication by a fixed scalar.
    Scale(f64),
    /// Addition of a fixed scalar.
    Shift(f64),
    Sin,
    Cos,
    Tanh,
    Exp,
    /// Integer power, negative exponents allowed.
    Powi(i32),
    /// Sum of all entries into a `1 x 1` array.
    Sum,
    /// Tile a `1 x 1` operand into the given shape.
    Broadcast { rows: usize, cols: usize },
    /// Horizontal concatenation of operands with equal row counts.
    Concat,
    /// Rectangular block of the operand.
    Select {
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    },
    /// Place the operand at `(row0, col0)` inside a zero array of `rows x cols`.
    Embed {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    /// Rows of the operand picked by index (repeats allowed).
    Gather(Rc<[usize]>),
    /// Inverse of `Gather`: rows are added into a zero array with `rows` rows.
    Scatter { index: Rc<[usize]>, rows: usize },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Prim(Prim),
}

struct Node {
    op: Op,
    args: Vec<usize>,
    value: Array,
    /// Whether any differentiable leaf is upstream of this node.
    grad: bool,
}

/// Single-owner recording of array operations for reverse-mode
/// differentiation. Nodes are appended in evaluation order, so every node's
/// operands precede it.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({}x{})", self.id, self.rows, self.cols)
    }
}

/// Adjoints produced by a numeric backward pass.
pub struct Gradients {
    adjoints: Vec<Option<Array>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Derivative of the pass's output with respect to `v` (zeros when `v`
    /// does not influence the output).
    pub fn wrt(&self, v: &Var<'_>) -> Array {
        match self.adjoints.get(v.id).and_then(Option::as_ref) {
            Some(a) => a.clone(),
            None => {
                let (r, c) = self.shapes.get(v.id).copied().unwrap_or((v.rows, v.cols));
                Array::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, args: Vec<usize>, value: Array, grad: bool) -> Var<'_> {
        let (rows, cols) = value.shape();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            op,
            args,
            value,
            grad,
        });
        Var {
            tape: self,
            id,
            rows,
            cols,
        }
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Array) -> Var<'_> {
        self.push(Op::Leaf, Vec::new(), value, true)
    }

    /// Non-differentiable leaf. Constants may still be targets of
    /// [`Tape::grad_graph`] and [`Tape::grad_wrt`].
    pub fn constant(&self, value: Array) -> Var<'_> {
        self.push(Op::Constant, Vec::new(), value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array::scalar(value))
    }

    fn check_owner(&self, v: &Var<'_>) -> Result<()> {
        if std::ptr::eq(v.tape, self) && v.id < self.len() {
            Ok(())
        } else {
            Err(Error::Usage(format!("{v:?} is not recorded on this tape")))
        }
    }

    /// Evaluate `prim` on `operands` and append the result to the tape.
    pub fn record<'t>(&'t self, prim: Prim, operands: &[Var<'t>]) -> Result<Var<'t>> {
        for v in operands {
            self.check_owner(v)?;
        }
        let (value, grad) = {
            let nodes = self.nodes.borrow();
            let values: Vec<&Array> = operands.iter().map(|v| &nodes[v.id].value).collect();
            let value = evaluate(&prim, &values)?;
            let grad = operands.iter().any(|v| nodes[v.id].grad);
            (value, grad)
        };
        let args = operands.iter().map(|v| v.id).collect();
        Ok(self.push(Op::Prim(prim), args, value, grad))
    }

    fn scalar_output(&self, output: &Var<'_>) -> Result<()> {
        self.check_owner(output)?;
        if output.rows != 1 || output.cols != 1 {
            return Err(Error::Usage(format!(
                "backward pass needs a 1x1 output, got {}x{}",
                output.rows, output.cols
            )));
        }
        Ok(())
    }

    /// Numeric reverse sweep seeded with 1 at `output`.
    ///
    /// Adjoints live in the returned value only, so repeated passes on the
    /// same tape start from zero and give identical results.
    pub fn gradients(&self, output: &Var<'_>) -> Result<Gradients> {
        self.scalar_output(output)?;
        let nodes = self.nodes.borrow();
        let n = output.id + 1;
        let mut adjoints: Vec<Option<Array>> = vec![None; n];
        adjoints[output.id] = Some(Array::scalar(1.0));
        for id in (0..n).rev() {
            let node = &nodes[id];
            if !node.grad {
                continue;
            }
            let Op::Prim(prim) = &node.op else { continue };
            let Some(g) = adjoints[id].take() else { continue };
            let args: Vec<&Array> = node.args.iter().map(|&a| &nodes[a].value).collect();
            for (which, &arg) in node.args.iter().enumerate() {
                if !nodes[arg].grad {
                    continue;
                }
                let contrib = vjp_numeric(prim, &args, &node.value, &g, which);
                match &mut adjoints[arg] {
                    Some(acc) => acc.accumulate(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            adjoints[id] = Some(g);
        }
        let shapes = nodes[..n].iter().map(|nd| nd.value.shape()).collect();
        Ok(Gradients { adjoints, shapes })
    }

    /// Numeric derivatives of the scalar `output` with respect to each
    /// target. Constant targets are supported.
    pub fn grad_wrt(&self, output: &Var<'_>, targets: &[Var<'_>]) -> Result<Vec<Array>> {
        for t in targets {
            self.check_owner(t)?;
        }
        // Constants are excluded from the numeric sweep, so route through the
        // graph version when any target is not differentiable.
        let needs_graph = {
            let nodes = self.nodes.borrow();
            targets.iter().any(|t| !nodes[t.id].grad)
        };
        if needs_graph {
            let vars = self.grad_graph(output, targets)?;
            return Ok(vars.iter().map(Var::value).collect());
        }
        let grads = self.gradients(output)?;
        Ok(targets.iter().map(|t| grads.wrt(t)).collect())
    }

    /// Reverse sweep whose adjoints are themselves recorded on the tape, so
    /// the returned gradients can be differentiated again (e.g. with respect
    /// to network parameters).
    pub fn grad_graph<'t>(&'t self, output: &Var<'t>, targets: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        self.scalar_output(output)?;
        for t in targets {
            self.check_owner(t)?;
        }
        let n = output.id + 1;
        let (ops, args, shapes) = {
            let nodes = self.nodes.borrow();
            let ops: Vec<Op> = nodes[..n].iter().map(|nd| nd.op.clone()).collect();
            let args: Vec<Vec<usize>> = nodes[..n].iter().map(|nd| nd.args.clone()).collect();
            let shapes: Vec<(usize, usize)> = nodes[..n].iter().map(|nd| nd.value.shape()).collect();
            (ops, args, shapes)
        };
        let mut relevant = vec![false; n];
        for t in targets {
            if t.id < n {
                relevant[t.id] = true;
            }
        }
        for id in 0..n {
            if !relevant[id] && args[id].iter().any(|&a| relevant[a]) {
                relevant[id] = true;
            }
        }
        let handle = |id: usize| Var {
            tape: self,
            id,
            rows: shapes[id].0,
            cols: shapes[id].1,
        };
        let mut adjoints: Vec<Option<Var<'t>>> = vec![None; n];
        if relevant[output.id] {
            adjoints[output.id] = Some(self.scalar(1.0));
        }
        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Op::Prim(prim) = &ops[id] else { continue };
            let Some(g) = adjoints[id] else { continue };
            let arg_vars: Vec<Var<'t>> = args[id].iter().map(|&a| handle(a)).collect();
            let out = handle(id);
            for (which, &arg) in args[id].iter().enumerate() {
                if !relevant[arg] {
                    continue;
                }
                let contrib = vjp_graph(prim, &arg_vars, out, g, which)?;
                adjoints[arg] = Some(match adjoints[arg] {
                    Some(acc) => acc.add(&contrib)?,
                    None => contrib,
                });
            }
        }
        Ok(targets
            .iter()
            .map(|t| match adjoints.get(t.id).copied().flatten() {
                Some(v) => v,
                None => self.constant(Array::zeros(t.rows, t.cols)),
            })
            .collect())
    }

    /// Jacobian of scalar `outputs` with respect to the entries of `input`
    /// (flattened row-major), one backward pass per output.
    pub fn jacobian_wrt_input(&self, outputs: &[Var<'_>], input: &Var<'_>) -> Result<Array> {
        let d = input.rows * input.cols;
        let mut jac = Array::zeros(outputs.len(), d);
        for (i, out) in outputs.iter().enumerate() {
            let g = self.grad_wrt(out, std::slice::from_ref(input))?;
            for (j, v) in g[0].data().iter().enumerate() {
                jac.set(i, j, *v);
            }
        }
        Ok(jac)
    }
}

impl<'t> Var<'t> {
    #[inline]
    pub fn id(&self) -> usize {
        self.id
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Array {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Array) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Value of a `1 x 1` variable.
    pub fn item(&self) -> f64 {
        self.with_value(|a| a.data()[0])
    }

    fn unary(&self, prim: Prim) -> Var<'t> {
        self.tape
            .record(prim, &[*self])
            .expect("shape-preserving unary op on a recorded variable")
    }

    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Prim::MatMul { ta: false, tb: false }, &[*self, *other])
    }

    pub fn matmul_t(&self, other: &Var<'t>, ta: bool, tb: bool) -> Result<Var<'t>> {
        self.tape.record(Prim::MatMul { ta, tb }, &[*self, *other])
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Prim::Add, &[*self, *other])
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Prim::Sub, &[*self, *other])
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.tape.record(Prim::Mul, &[*self, *other])
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Prim::Scale(c))
    }

    pub fn shift(&self, c: f64) -> Var<'t> {
        self.unary(Prim::Shift(c))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn sin(&self) -> Var<'t> {
        self.unary(Prim::Sin)
    }

    pub fn cos(&self) -> Var<'t> {
        self.unary(Prim::Cos)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Prim::Tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Prim::Exp)
    }

    pub fn powi(&self, n: i32) -> Var<'t> {
        self.unary(Prim::Powi(n))
    }

    pub fn square(&self) -> Var<'t> {
        self.powi(2)
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Prim::Sum)
    }

    pub fn broadcast(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        self.tape.record(Prim::Broadcast { rows, cols }, &[*self])
    }

    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Configuration("concat of zero arrays".into()))?;
        first.tape.record(Prim::Concat, parts)
    }

    pub fn select(&self, row0: usize, rows: usize, col0: usize, cols: usize) -> Result<Var<'t>> {
        self.tape.record(
            Prim::Select {
                row0,
                rows,
                col0,
                cols,
            },
            &[*self],
        )
    }

    /// Column `c` as an `n x 1` variable.
    pub fn col(&self, c: usize) -> Result<Var<'t>> {
        self.select(0, self.rows, c, 1)
    }

    /// Rows `[row0, row0 + rows)`.
    pub fn row_block(&self, row0: usize, rows: usize) -> Result<Var<'t>> {
        self.select(row0, rows, 0, self.cols)
    }

    pub fn embed(&self, row0: usize, col0: usize, rows: usize, cols: usize) -> Result<Var<'t>> {
        self.tape.record(
            Prim::Embed {
                row0,
                col0,
                rows,
                cols,
            },
            &[*self],
        )
    }

    pub fn gather(&self, index: Rc<[usize]>) -> Result<Var<'t>> {
        self.tape.record(Prim::Gather(index), &[*self])
    }

    pub fn scatter(&self, index: Rc<[usize]>, rows: usize) -> Result<Var<'t>> {
        self.tape.record(Prim::Scatter { index, rows }, &[*self])
    }
}

fn shape_err(op: &str, a: &Array, b: &Array) -> Error {
    Error::Configuration(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

fn binary(op: &str, a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
    if a.shape() == b.shape() {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Array::new(a.rows(), a.cols(), data)
    } else if a.is_scalar() {
        let x = a.item();
        Ok(b.map(|y| f(x, y)))
    } else if b.is_scalar() {
        let y = b.item();
        Ok(a.map(|x| f(x, y)))
    } else {
        Err(shape_err(op, a, b))
    }
}

fn arity(prim: &Prim, n: usize, expected: usize) -> Result<()> {
    if n == expected {
        Ok(())
    } else {
        Err(Error::Configuration(format!(
            "{prim:?} takes {expected} operand(s), got {n}"
        )))
    }
}

fn evaluate(prim: &Prim, a: &[&Array]) -> Result<Array> {
    match prim {
        Prim::Concat => {
            if a.is_empty() {
                return Err(Error::Configuration("concat of zero arrays".into()));
            }
            let rows = a[0].rows();
            let mut cols = 0;
            for x in a {
                if x.rows() != rows {
                    return Err(shape_err("concat", a[0], x));
                }
                cols += x.cols();
            }
            let mut out = Array::zeros(rows, cols);
            for r in 0..rows {
                let mut c0 = 0;
                for x in a {
                    let src = x.row_slice(r);
                    out.data_mut()[r * cols + c0..r * cols + c0 + src.len()].copy_from_slice(src);
                    c0 += x.cols();
                }
            }
            return Ok(out);
        }
        Prim::MatMul { .. } | Prim::Add | Prim::Sub | Prim::Mul => arity(prim, a.len(), 2)?,
        _ => arity(prim, a.len(), 1)?,
    }
    let x = a[0];
    Ok(match prim {
        Prim::MatMul { ta, tb } => x.matmul(a[1], *ta, *tb)?,
        Prim::Add => binary("add", x, a[1], |p, q| p + q)?,
        Prim::Sub => binary("sub", x, a[1], |p, q| p - q)?,
        Prim::Mul => binary("mul", x, a[1], |p, q| p * q)?,
        Prim::Scale(c) => x.map(|v| v * c),
        Prim::Shift(c) => x.map(|v| v + c),
        Prim::Sin => x.map(f64::sin),
        Prim::Cos => x.map(f64::cos),
        Prim::Tanh => x.map(f64::tanh),
        Prim::Exp => x.map(f64::exp),
        Prim::Powi(n) => x.map(|v| v.powi(*n)),
        Prim::Sum => Array::scalar(x.sum()),
        Prim::Broadcast { rows, cols } => {
            if !x.is_scalar() {
                return Err(Error::Configuration(format!(
                    "broadcast needs a 1x1 operand, got {}x{}",
                    x.rows(),
                    x.cols()
                )));
            }
            Array::filled(*rows, *cols, x.item())
        }
        Prim::Select {
            row0,
            rows,
            col0,
            cols,
        } => {
            if row0 + rows > x.rows() || col0 + cols > x.cols() {
                return Err(Error::Configuration(format!(
                    "select block [{row0}+{rows}, {col0}+{cols}] outside {}x{}",
                    x.rows(),
                    x.cols()
                )));
            }
            select(x, *row0, *rows, *col0, *cols)
        }
        Prim::Embed {
            row0,
            col0,
            rows,
            cols,
        } => {
            if row0 + x.rows() > *rows || col0 + x.cols() > *cols {
                return Err(Error::Configuration(format!(
                    "embed of {}x{} at ({row0},{col0}) exceeds {rows}x{cols}",
                    x.rows(),
                    x.cols()
                )));
            }
            embed(x, *row0, *col0, *rows, *cols)
        }
        Prim::Gather(index) => {
            if let Some(&bad) = index.iter().find(|&&i| i >= x.rows()) {
                return Err(Error::Configuration(format!(
                    "gather index {bad} out of range for {} rows",
                    x.rows()
                )));
            }
            gather(x, index)
        }
        Prim::Scatter { index, rows } => {
            if index.len() != x.rows() {
                return Err(Error::Configuration(format!(
                    "scatter needs one index per row: {} indices for {} rows",
                    index.len(),
                    x.rows()
                )));
            }
            if let Some(&bad) = index.iter().find(|&&i| i >= *rows) {
                return Err(Error::Configuration(format!(
                    "scatter index {bad} out of range for {rows} rows"
                )));
            }
            scatter(x, index, *rows)
        }
        Prim::Concat => unreachable!(),
    })
}

fn select(x: &Array, row0: usize, rows: usize, col0: usize, cols: usize) -> Array {
    let mut data = Vec::with_capacity(rows * cols);
    for r in row0..row0 + rows {
        data.extend_from_slice(&x.row_slice(r)[col0..col0 + cols]);
    }
    Array::new(rows, cols, data).expect("block shape")
}

fn embed(x: &Array, row0: usize, col0: usize, rows: usize, cols: usize) -> Array {
    let mut out = Array::zeros(rows, cols);
    for r in 0..x.rows() {
        let dst = (row0 + r) * cols + col0;
        out.data_mut()[dst..dst + x.cols()].copy_from_slice(x.row_slice(r));
    }
    out
}

fn gather(x: &Array, index: &[usize]) -> Array {
    let mut data = Vec::with_capacity(index.len() * x.cols());
    for &i in index {
        data.extend_from_slice(x.row_slice(i));
    }
    Array::new(index.len(), x.cols(), data).expect("gather shape")
}

fn scatter(x: &Array, index: &[usize], rows: usize) -> Array {
    let cols = x.cols();
    let mut out = Array::zeros(rows, cols);
    for (r, &i) in index.iter().enumerate() {
        let src = x.row_slice(r);
        for (dst, v) in out.data_mut()[i * cols..(i + 1) * cols].iter_mut().zip(src) {
            *dst += v;
        }
    }
    out
}

/// Reduce an adjoint to the shape of an operand that was broadcast from 1x1.
fn reduce_to(g: Array, target: &Array) -> Array {
    if target.is_scalar() && !g.is_scalar() {
        Array::scalar(g.sum())
    } else {
        g
    }
}

fn zip_map(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    binary("vjp", a, b, f).expect("vjp operands share the output shape")
}

fn vjp_numeric(prim: &Prim, args: &[&Array], out: &Array, g: &Array, which: usize) -> Array {
    let x = args[0];
    match prim {
        Prim::MatMul { ta, tb } => {
            let (a, b) = (args[0], args[1]);
            let r = match (which, *ta, *tb) {
                (0, false, _) => g.matmul(b, false, !tb),
                (0, true, _) => b.matmul(g, *tb, true),
                (_, _, false) => a.matmul(g, !ta, false),
                (_, _, true) => g.matmul(a, true, *ta),
            };
            r.expect("matmul vjp shapes")
        }
        Prim::Add => reduce_to(g.clone(), args[which]),
        Prim::Sub => {
            let c = if which == 0 { g.clone() } else { g.map(|v| -v) };
            reduce_to(c, args[which])
        }
        Prim::Mul => {
            let other = args[1 - which];
            reduce_to(zip_map(g, other, |p, q| p * q), args[which])
        }
        Prim::Scale(c) => g.map(|v| v * c),
        Prim::Shift(_) => g.clone(),
        Prim::Sin => zip_map(g, x, |p, q| p * q.cos()),
        Prim::Cos => zip_map(g, x, |p, q| -p * q.sin()),
        Prim::Tanh => zip_map(g, out, |p, y| p * (1.0 - y * y)),
        Prim::Exp => zip_map(g, out, |p, y| p * y),
        Prim::Powi(n) => {
            let n = *n;
            if n == 0 {
                Array::zeros(x.rows(), x.cols())
            } else {
                zip_map(g, x, |p, q| p * f64::from(n) * q.powi(n - 1))
            }
        }
        Prim::Sum => Array::filled(x.rows(), x.cols(), g.item()),
        Prim::Broadcast { .. } => Array::scalar(g.sum()),
        Prim::Concat => {
            let col0: usize = args[..which].iter().map(|a| a.cols()).sum();
            select(g, 0, g.rows(), col0, args[which].cols())
        }
        Prim::Select { row0, col0, .. } => embed(g, *row0, *col0, x.rows(), x.cols()),
        Prim::Embed { row0, col0, .. } => select(g, *row0, x.rows(), *col0, x.cols()),
        Prim::Gather(index) => scatter(g, index, x.rows()),
        Prim::Scatter { index, .. } => gather(g, index),
    }
}

fn reduce_var<'t>(g: Var<'t>, target: &Var<'t>) -> Var<'t> {
    if target.shape() == (1, 1) && g.shape() != (1, 1) {
        g.sum()
    } else {
        g
    }
}

fn vjp_graph<'t>(prim: &Prim, args: &[Var<'t>], out: Var<'t>, g: Var<'t>, which: usize) -> Result<Var<'t>> {
    let x = args[0];
    Ok(match prim {
        Prim::MatMul { ta, tb } => {
            let (a, b) = (args[0], args[1]);
            match (which, *ta, *tb) {
                (0, false, _) => g.matmul_t(&b, false, !tb)?,
                (0, true, _) => b.matmul_t(&g, *tb, true)?,
                (_, _, false) => a.matmul_t(&g, !ta, false)?,
                (_, _, true) => g.matmul_t(&a, true, *ta)?,
            }
        }
        Prim::Add => reduce_var(g, &args[which]),
        Prim::Sub => {
            let c = if which == 0 { g } else { g.neg() };
            reduce_var(c, &args[which])
        }
        Prim::Mul => reduce_var(g.mul(&args[1 - which])?, &args[which]),
        Prim::Scale(c) => g.scale(*c),
        Prim::Shift(_) => g,
        Prim::Sin => g.mul(&x.cos())?,
        Prim::Cos => g.mul(&x.sin())?.neg(),
        Prim::Tanh => g.mul(&out.square().neg().shift(1.0))?,
        Prim::Exp => g.mul(&out)?,
        Prim::Powi(n) => {
            let n = *n;
            if n == 0 {
                x.tape.constant(Array::zeros(x.rows, x.cols))
            } else if n == 1 {
                g
            } else {
                g.mul(&x.powi(n - 1).scale(f64::from(n)))?
            }
        }
        Prim::Sum => g.broadcast(x.rows, x.cols)?,
        Prim::Broadcast { .. } => g.sum(),
        Prim::Concat => {
            let col0: usize = args[..which].iter().map(|a| a.cols).sum();
            g.select(0, g.rows, col0, args[which].cols)?
        }
        Prim::Select { row0, col0, .. } => g.embed(*row0, *col0, x.rows, x.cols)?,
        Prim::Embed { row0, col0, .. } => g.select(*row0, x.rows, *col0, x.cols)?,
        Prim::Gather(index) => g.scatter(index.clone(), x.rows)?,
        Prim::Scatter { index, .. } => g.gather(index.clone())?,
    })
}
