//! Define-then-run computation graphs with reverse-mode adjoints.
//!
//! A [`Graph`] records primitive operations over named leaves and constants.
//! Leaves are bound at evaluation time through [`Bindings`], so the same graph
//! can be re-evaluated under perturbed bindings (finite differences) or fresh
//! parameter values. Nodes are appended in topological order; a node's inputs
//! always have smaller ids, which keeps the graph acyclic by construction.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::array::{axpy, dot, matmul, matmul_nt, matmul_tn, Array};
use crate::error::{Error, Result};
use crate::rng::mix_seed;

/// `sqrt(2/π)` in the tanh approximation of GELU.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh approximation of GELU.
pub const GELU_CUBIC: f64 = 0.044_715;
/// Variance epsilon used by the model's row normalization layers.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Reduction direction for [`Graph::sum_axis`] and [`Graph::mean_axis`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Collapse the rows: `r×c → 1×c`.
    Rows,
    /// Collapse the columns: `r×c → r×1`.
    Cols,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    Input,
    Constant,
    Add,
    Sub,
    Mul,
    MatMul,
    Transpose,
    Reshape,
    ConcatRows,
    GatherRows,
    ScatterRows,
    SliceCols,
    Sum,
    SumAxis,
    MeanAxis,
    Scale,
    AddRow,
    LayerNorm,
    Softmax,
    LogSoftmax,
    Gelu,
    Exp,
    Log,
    SquaredNorm,
    Dropout,
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Primitive::Input => "input",
            Primitive::Constant => "constant",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::ConcatRows => "concat_rows",
            Primitive::GatherRows => "gather_rows",
            Primitive::ScatterRows => "scatter_rows",
            Primitive::SliceCols => "slice_cols",
            Primitive::Sum => "sum",
            Primitive::SumAxis => "sum_axis",
            Primitive::MeanAxis => "mean_axis",
            Primitive::Scale => "scale",
            Primitive::AddRow => "add_row",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Softmax => "softmax",
            Primitive::LogSoftmax => "log_softmax",
            Primitive::Gelu => "gelu",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::SquaredNorm => "squared_norm",
            Primitive::Dropout => "dropout",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Primitive {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        use Primitive::*;
        let all = [
            Input,
            Constant,
            Add,
            Sub,
            Mul,
            MatMul,
            Transpose,
            Reshape,
            ConcatRows,
            GatherRows,
            ScatterRows,
            SliceCols,
            Sum,
            SumAxis,
            MeanAxis,
            Scale,
            AddRow,
            LayerNorm,
            Softmax,
            LogSoftmax,
            Gelu,
            Exp,
            Log,
            SquaredNorm,
            Dropout,
        ];
        all.into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown primitive `{s}`")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Constant(Array),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId, Vec<usize>),
    ConcatRows(Vec<NodeId>),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>, usize),
    SliceCols(NodeId, usize, usize),
    Sum(NodeId),
    SumAxis(NodeId, Axis),
    MeanAxis(NodeId, Axis),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Softmax(NodeId),
    LogSoftmax(NodeId, Option<Vec<bool>>),
    Gelu(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SquaredNorm(NodeId),
    Dropout(NodeId, f64),
}

impl Op {
    fn primitive(&self) -> Primitive {
        match self {
            Op::Input(_) => Primitive::Input,
            Op::Constant(_) => Primitive::Constant,
            Op::Add(..) => Primitive::Add,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Transpose(_) => Primitive::Transpose,
            Op::Reshape(..) => Primitive::Reshape,
            Op::ConcatRows(_) => Primitive::ConcatRows,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::ScatterRows(..) => Primitive::ScatterRows,
            Op::SliceCols(..) => Primitive::SliceCols,
            Op::Sum(_) => Primitive::Sum,
            Op::SumAxis(..) => Primitive::SumAxis,
            Op::MeanAxis(..) => Primitive::MeanAxis,
            Op::Scale(..) => Primitive::Scale,
            Op::AddRow(..) => Primitive::AddRow,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Softmax(_) => Primitive::Softmax,
            Op::LogSoftmax(..) => Primitive::LogSoftmax,
            Op::Gelu(_) => Primitive::Gelu,
            Op::Exp(_) => Primitive::Exp,
            Op::Log(_) => Primitive::Log,
            Op::SquaredNorm(_) => Primitive::SquaredNorm,
            Op::Dropout(..) => Primitive::Dropout,
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Constant(_) => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::AddRow(a, b) => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::ConcatRows(parts) => parts.clone(),
            Op::Transpose(a)
            | Op::Reshape(a, _)
            | Op::GatherRows(a, _)
            | Op::ScatterRows(a, _, _)
            | Op::SliceCols(a, _, _)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::MeanAxis(a, _)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::LogSoftmax(a, _)
            | Op::Gelu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::SquaredNorm(a)
            | Op::Dropout(a, _) => vec![*a],
        }
    }
}

/// Named leaf values supplied to an evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Bindings {
    map: BTreeMap<String, Array>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) -> Option<Array> {
        self.map.insert(name.into(), value)
    }

    pub fn with(mut self, name: impl Into<String>, value: Array) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.map.get_mut(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Array> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// A computation graph. Build it with the primitive methods, then call
/// [`Graph::evaluate`], [`Graph::gradients`] or [`Graph::finite_difference`].
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Op>,
    inputs: HashMap<String, NodeId>,
    mode: Mode,
    seed: u64,
    fault: Option<(Primitive, f64)>,
}

impl Graph {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self { nodes: Vec::new(), inputs: HashMap::new(), mode, seed, fault: None }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: scales every adjoint emitted by `primitive` by `factor`,
    /// producing deliberately wrong gradients.
    #[doc(hidden)]
    pub fn corrupt_adjoint(&mut self, primitive: Primitive, factor: f64) {
        self.fault = Some((primitive, factor));
    }

    fn push(&mut self, op: Op) -> NodeId {
        for input in op.inputs() {
            assert!(input.0 < self.nodes.len(), "node input from another graph");
        }
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// A named leaf. Repeated calls with the same name return the same node.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_id(&self, name: &str) -> Option<NodeId> {
        self.inputs.get(name).copied()
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        self.push(Op::Constant(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> NodeId {
        self.push(Op::Reshape(a, shape))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::ConcatRows(parts.to_vec()))
    }

    /// Selects rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        self.push(Op::GatherRows(a, indices))
    }

    /// Places row `r` of `a` at row `indices[r]` of an `n_rows`-row zero
    /// matrix, summing rows that land on the same index.
    pub fn scatter_rows(&mut self, a: NodeId, indices: Vec<usize>, n_rows: usize) -> NodeId {
        self.push(Op::ScatterRows(a, indices, n_rows))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, end: usize) -> NodeId {
        self.push(Op::SliceCols(a, start, end))
    }

    /// Sum of all entries, as a 1×1 array.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        self.push(Op::SumAxis(a, axis))
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: Axis) -> NodeId {
        self.push(Op::MeanAxis(a, axis))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        assert!(factor.is_finite());
        self.push(Op::Scale(a, factor))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        self.push(Op::AddRow(a, row))
    }

    /// Row-wise normalization to zero mean and unit variance followed by a
    /// learnable `1×c` scale and shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> NodeId {
        assert!(eps >= 0.0);
        self.push(Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    /// Row-wise log-softmax. Entries flagged in `exclude` (flat, same length
    /// as the input) are left out of every normalizer and evaluate to 0.
    pub fn log_softmax_rows(&mut self, a: NodeId, exclude: Option<Vec<bool>>) -> NodeId {
        self.push(Op::LogSoftmax(a, exclude))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    /// Sum of squared entries, as a 1×1 array.
    pub fn squared_norm(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SquaredNorm(a))
    }

    /// Inverted dropout: in train mode each entry is zeroed with probability
    /// `rate` and survivors are scaled by `1/(1-rate)`; identity in eval mode.
    pub fn dropout(&mut self, a: NodeId, rate: f64) -> NodeId {
        assert!((0.0..1.0).contains(&rate));
        self.push(Op::Dropout(a, rate))
    }

    fn describe(&self, id: usize) -> String {
        match &self.nodes[id] {
            Op::Input(name) => format!("node #{id} (input `{name}`)"),
            op => format!("node #{id} ({})", op.primitive()),
        }
    }

    fn mismatch(&self, id: usize, detail: String) -> Error {
        Error::ShapeMismatch { node: self.describe(id), detail }
    }

    /// Nodes that `root` depends on, including itself.
    fn needed(&self, root: NodeId) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        needed[root.0] = true;
        for id in (0..=root.0).rev() {
            if needed[id] {
                for input in self.nodes[id].inputs() {
                    needed[input.0] = true;
                }
            }
        }
        needed
    }

    fn dropout_scales(&self, id: usize, n: usize, rate: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.seed, &[id as u64]));
        let keep = 1.0 / (1.0 - rate);
        (0..n).map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep }).collect()
    }

    /// Evaluates `root`, caching every intermediate value.
    pub fn forward<'a>(&'a self, root: NodeId, bindings: &'a Bindings) -> Result<Evaluation<'a>> {
        let needed = self.needed(root);
        let mut values: Vec<Option<Cow<'a, Array>>> = vec![None; root.0 + 1];
        for id in 0..=root.0 {
            if !needed[id] {
                continue;
            }
            let value = match &self.nodes[id] {
                Op::Input(name) => Cow::Borrowed(bindings.get(name).ok_or_else(|| Error::UnboundLeaf(name.clone()))?),
                Op::Constant(a) => Cow::Borrowed(a),
                _ => {
                    let get = |i: usize| -> &Array { values[i].as_deref().expect("inputs precede their consumers") };
                    Cow::Owned(self.compute(id, &get)?)
                }
            };
            values[id] = Some(value);
        }
        Ok(Evaluation { graph: self, bindings, root, values, needed })
    }

    pub fn evaluate(&self, root: NodeId, bindings: &Bindings) -> Result<Array> {
        Ok(self.forward(root, bindings)?.root_value().clone())
    }

    /// `∂root/∂leaf` for every requested leaf. The root must be a scalar.
    pub fn gradients(&self, root: NodeId, bindings: &Bindings, wrt: &[&str]) -> Result<BTreeMap<String, Array>> {
        self.forward(root, bindings)?.backward(wrt)
    }

    /// Central differences `(f(x+h) − f(x−h)) / 2h` for every coordinate of `leaf`.
    pub fn finite_difference(&self, root: NodeId, bindings: &Bindings, leaf: &str, h: f64) -> Result<Array> {
        let base = bindings.get(leaf).ok_or_else(|| Error::UnboundLeaf(leaf.to_string()))?;
        let coords: Vec<usize> = (0..base.len()).collect();
        let fd = self.finite_difference_at(root, bindings, leaf, &coords, h)?;
        Array::new(base.shape().to_vec(), fd)
    }

    /// Central differences for selected flat coordinates of `leaf`. Only the
    /// nodes downstream of the leaf are recomputed per perturbation.
    pub fn finite_difference_at(
        &self,
        root: NodeId,
        bindings: &Bindings,
        leaf: &str,
        coords: &[usize],
        h: f64,
    ) -> Result<Vec<f64>> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(Error::BadStep(h));
        }
        let base = self.forward(root, bindings)?;
        let root_shape = base.root_value().shape().to_vec();
        if base.root_value().len() != 1 {
            return Err(Error::NonScalarRoot { shape: root_shape });
        }
        let leaf_value = bindings.get(leaf).ok_or_else(|| Error::UnboundLeaf(leaf.to_string()))?;
        let Some(leaf_id) = self.input_id(leaf).filter(|id| id.0 <= root.0 && base.needed[id.0]) else {
            return Ok(vec![0.0; coords.len()]);
        };

        let mut dirty = vec![false; root.0 + 1];
        dirty[leaf_id.0] = true;
        let mut order = Vec::new();
        for id in leaf_id.0 + 1..=root.0 {
            if base.needed[id] && self.nodes[id].inputs().iter().any(|i| dirty[i.0]) {
                dirty[id] = true;
                order.push(id);
            }
        }

        let mut perturbed = leaf_value.clone();
        let mut overlay: Vec<Option<Array>> = vec![None; root.0 + 1];
        let eval_at = |perturbed: &Array, overlay: &mut Vec<Option<Array>>| -> Result<f64> {
            for &id in &order {
                let value = {
                    let get = |i: usize| -> &Array {
                        if i == leaf_id.0 {
                            perturbed
                        } else if dirty[i] {
                            overlay[i].as_ref().expect("dirty inputs precede their consumers")
                        } else {
                            base.value(NodeId(i))
                        }
                    };
                    self.compute(id, &get)?
                };
                overlay[id] = Some(value);
            }
            Ok(if root == leaf_id {
                perturbed.data()[0]
            } else {
                overlay[root.0].as_ref().map_or(base.root_value().data()[0], |a| a.data()[0])
            })
        };

        let mut out = Vec::with_capacity(coords.len());
        for &c in coords {
            let x0 = leaf_value.data()[c];
            perturbed.data_mut()[c] = x0 + h;
            let plus = eval_at(&perturbed, &mut overlay)?;
            perturbed.data_mut()[c] = x0 - h;
            let minus = eval_at(&perturbed, &mut overlay)?;
            perturbed.data_mut()[c] = x0;
            out.push((plus - minus) / (2.0 * h));
        }
        Ok(out)
    }

    fn compute<'v>(&self, id: usize, get: &dyn Fn(usize) -> &'v Array) -> Result<Array> {
        let out = self.compute_unchecked(id, get)?;
        if !out.all_finite() {
            return Err(Error::NonFinite { node: self.describe(id) });
        }
        Ok(out)
    }

    fn expect_matrix(&self, id: usize, a: &Array) -> Result<(usize, usize)> {
        if a.is_matrix() {
            Ok((a.rows(), a.cols()))
        } else {
            Err(self.mismatch(id, format!("expected a 2-D operand, got shape {:?}", a.shape())))
        }
    }

    fn same_shape(&self, id: usize, a: &Array, b: &Array) -> Result<()> {
        if a.shape() == b.shape() {
            Ok(())
        } else {
            Err(self.mismatch(id, format!("operand shapes {:?} and {:?} differ", a.shape(), b.shape())))
        }
    }

    fn compute_unchecked<'v>(&self, id: usize, get: &dyn Fn(usize) -> &'v Array) -> Result<Array> {
        let elementwise = |a: &Array, f: &dyn Fn(f64) -> f64| {
            Array::from_parts(a.shape().to_vec(), a.data().iter().map(|&v| f(v)).collect())
        };
        Ok(match &self.nodes[id] {
            Op::Input(_) | Op::Constant(_) => unreachable!("leaves are bound, not computed"),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (x, y) = (get(a.0), get(b.0));
                self.same_shape(id, x, y)?;
                let f: fn(f64, f64) -> f64 = match &self.nodes[id] {
                    Op::Add(..) => |p, q| p + q,
                    Op::Sub(..) => |p, q| p - q,
                    _ => |p, q| p * q,
                };
                Array::from_parts(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect())
            }
            Op::MatMul(a, b) => {
                let (x, y) = (get(a.0), get(b.0));
                let (m, k) = self.expect_matrix(id, x)?;
                let (k2, n) = self.expect_matrix(id, y)?;
                if k != k2 {
                    return Err(self.mismatch(id, format!("cannot multiply {m}×{k} by {k2}×{n}")));
                }
                Array::from_parts(vec![m, n], matmul(x.data(), y.data(), m, k, n))
            }
            Op::Transpose(a) => {
                let x = get(a.0);
                self.expect_matrix(id, x)?;
                x.transpose()
            }
            Op::Reshape(a, shape) => {
                let x = get(a.0);
                if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
                    return Err(self.mismatch(id, format!("cannot reshape {:?} into {shape:?}", x.shape())));
                }
                Array::from_parts(shape.clone(), x.data().to_vec())
            }
            Op::ConcatRows(parts) => {
                if parts.is_empty() {
                    return Err(self.mismatch(id, "nothing to concatenate".into()));
                }
                let cols = self.expect_matrix(id, get(parts[0].0))?.1;
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let x = get(p.0);
                    let (r, c) = self.expect_matrix(id, x)?;
                    if c != cols {
                        return Err(self.mismatch(id, format!("column counts {cols} and {c} differ")));
                    }
                    rows += r;
                    data.extend_from_slice(x.data());
                }
                Array::from_parts(vec![rows, cols], data)
            }
            Op::GatherRows(a, idx) => {
                let x = get(a.0);
                let (r, c) = self.expect_matrix(id, x)?;
                if idx.is_empty() {
                    return Err(self.mismatch(id, "empty row selection".into()));
                }
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    if i >= r {
                        return Err(self.mismatch(id, format!("row {i} out of range for {r} rows")));
                    }
                    data.extend_from_slice(x.row(i));
                }
                Array::from_parts(vec![idx.len(), c], data)
            }
            Op::ScatterRows(a, idx, n) => {
                let x = get(a.0);
                let (r, c) = self.expect_matrix(id, x)?;
                if r != idx.len() {
                    return Err(self.mismatch(id, format!("{r} rows for {} target indices", idx.len())));
                }
                let mut data = vec![0.0; n * c];
                for (src, &dst) in idx.iter().enumerate() {
                    if dst >= *n {
                        return Err(self.mismatch(id, format!("target row {dst} out of range for {n} rows")));
                    }
                    axpy(1.0, x.row(src), &mut data[dst * c..(dst + 1) * c]);
                }
                Array::from_parts(vec![*n, c], data)
            }
            Op::SliceCols(a, start, end) => {
                let x = get(a.0);
                let (r, c) = self.expect_matrix(id, x)?;
                if start >= end || *end > c {
                    return Err(self.mismatch(id, format!("column range {start}..{end} invalid for {c} columns")));
                }
                let mut data = Vec::with_capacity(r * (end - start));
                for i in 0..r {
                    data.extend_from_slice(&x.row(i)[*start..*end]);
                }
                Array::from_parts(vec![r, end - start], data)
            }
            Op::Sum(a) => Array::from_parts(vec![1, 1], vec![get(a.0).data().iter().sum()]),
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = get(a.0);
                let (r, c) = self.expect_matrix(id, x)?;
                let mean = matches!(self.nodes[id], Op::MeanAxis(..));
                match axis {
                    Axis::Rows => {
                        let mut out = vec![0.0; c];
                        for i in 0..r {
                            axpy(1.0, x.row(i), &mut out);
                        }
                        if mean {
                            out.iter_mut().for_each(|v| *v /= r as f64);
                        }
                        Array::from_parts(vec![1, c], out)
                    }
                    Axis::Cols => {
                        let out = (0..r)
                            .map(|i| {
                                let s: f64 = x.row(i).iter().sum();
                                if mean {
                                    s / c as f64
                                } else {
                                    s
                                }
                            })
                            .collect();
                        Array::from_parts(vec![r, 1], out)
                    }
                }
            }
            Op::Scale(a, f) => elementwise(get(a.0), &|v| v * f),
            Op::AddRow(a, b) => {
                let (x, row) = (get(a.0), get(b.0));
                let (r, c) = self.expect_matrix(id, x)?;
                if row.shape() != [1, c] {
                    return Err(
                        self.mismatch(id, format!("row shape {:?} does not broadcast over {r}×{c}", row.shape()))
                    );
                }
                let mut data = x.data().to_vec();
                for i in 0..r {
                    axpy(1.0, row.data(), &mut data[i * c..(i + 1) * c]);
                }
                Array::from_parts(vec![r, c], data)
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, g, b) = (get(x.0), get(gamma.0), get(beta.0));
                let (r, c) = self.expect_matrix(id, xv)?;
                if g.shape() != [1, c] || b.shape() != [1, c] {
                    return Err(self.mismatch(
                        id,
                        format!("scale/shift shapes {:?}/{:?} do not match width {c}", g.shape(), b.shape()),
                    ));
                }
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (xhat, _) = normalize_row(xv.row(i), *eps);
                    data.extend(xhat.iter().zip(g.data()).zip(b.data()).map(|((h, g), b)| g * h + b));
                }
                Array::from_parts(vec![r, c], data)
            }
            Op::Softmax(a) => {
                let x = get(a.0);
                let (r, c) = self.expect_matrix(id, x)?;
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = x.row(i);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                    let total: f64 = exps.iter().sum();
                    data.extend(exps.iter().map(|e| e / total));
                }
                Array::from_parts(vec![r, c], data)
            }
            Op::LogSoftmax(a, exclude) => {
                let x = get(a.0);
                let (r, c) = self.expect_matrix(id, x)?;
                if let Some(mask) = exclude {
                    if mask.len() != r * c {
                        return Err(self.mismatch(id, format!("exclusion mask has {} entries for {r}×{c}", mask.len())));
                    }
                }
                let included = |i: usize, j: usize| exclude.as_ref().is_none_or(|m| !m[i * c + j]);
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    let row = x.row(i);
                    let max = (0..c).filter(|&j| included(i, j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return Err(self.mismatch(id, format!("row {i} excludes every entry")));
                    }
                    let total: f64 = (0..c).filter(|&j| included(i, j)).map(|j| (row[j] - max).exp()).sum();
                    let lse = max + total.ln();
                    for j in (0..c).filter(|&j| included(i, j)) {
                        data[i * c + j] = row[j] - lse;
                    }
                }
                Array::from_parts(vec![r, c], data)
            }
            Op::Gelu(a) => elementwise(get(a.0), &gelu),
            Op::Exp(a) => elementwise(get(a.0), &f64::exp),
            Op::Log(a) => elementwise(get(a.0), &f64::ln),
            Op::SquaredNorm(a) => {
                let x = get(a.0).data();
                Array::from_parts(vec![1, 1], vec![dot(x, x)])
            }
            Op::Dropout(a, rate) => {
                let x = get(a.0);
                match self.mode {
                    Mode::Eval => x.clone(),
                    Mode::Train => {
                        let scales = self.dropout_scales(id, x.len(), *rate);
                        Array::from_parts(
                            x.shape().to_vec(),
                            x.data().iter().zip(&scales).map(|(v, s)| v * s).collect(),
                        )
                    }
                }
            }
        })
    }

    /// Adjoints of `id`'s inputs given the adjoint `grad` of its output.
    fn adjoints<'v>(&self, id: usize, grad: &Array, get: &dyn Fn(usize) -> &'v Array) -> Vec<(usize, Array)> {
        let like = |a: &Array, data: Vec<f64>| Array::from_parts(a.shape().to_vec(), data);
        let g = grad.data();
        let mut out: Vec<(usize, Array)> = match &self.nodes[id] {
            Op::Input(_) | Op::Constant(_) => Vec::new(),
            Op::Add(a, b) => vec![(a.0, grad.clone()), (b.0, grad.clone())],
            Op::Sub(a, b) => vec![(a.0, grad.clone()), (b.0, like(grad, g.iter().map(|v| -v).collect()))],
            Op::Mul(a, b) => {
                let (x, y) = (get(a.0), get(b.0));
                vec![
                    (a.0, like(x, g.iter().zip(y.data()).map(|(g, y)| g * y).collect())),
                    (b.0, like(y, g.iter().zip(x.data()).map(|(g, x)| g * x).collect())),
                ]
            }
            Op::MatMul(a, b) => {
                let (x, y) = (get(a.0), get(b.0));
                let (m, k, n) = (x.rows(), x.cols(), y.cols());
                vec![
                    (a.0, Array::from_parts(vec![m, k], matmul_nt(g, y.data(), m, n, k))),
                    (b.0, Array::from_parts(vec![k, n], matmul_tn(x.data(), g, m, k, n))),
                ]
            }
            Op::Transpose(a) => vec![(a.0, grad.transpose())],
            Op::Reshape(a, _) => vec![(a.0, like(get(a.0), g.to_vec()))],
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|p| {
                        let x = get(p.0);
                        let slice = g[offset..offset + x.len()].to_vec();
                        offset += x.len();
                        (p.0, like(x, slice))
                    })
                    .collect()
            }
            Op::GatherRows(a, idx) => {
                let x = get(a.0);
                let c = x.cols();
                let mut data = vec![0.0; x.len()];
                for (src, &dst) in idx.iter().enumerate() {
                    axpy(1.0, grad.row(src), &mut data[dst * c..(dst + 1) * c]);
                }
                vec![(a.0, like(x, data))]
            }
            Op::ScatterRows(a, idx, _) => {
                let x = get(a.0);
                let mut data = Vec::with_capacity(x.len());
                for &i in idx {
                    data.extend_from_slice(grad.row(i));
                }
                vec![(a.0, like(x, data))]
            }
            Op::SliceCols(a, start, end) => {
                let x = get(a.0);
                let (r, c) = (x.rows(), x.cols());
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    data[i * c + start..i * c + end].copy_from_slice(grad.row(i));
                }
                vec![(a.0, like(x, data))]
            }
            Op::Sum(a) => {
                let x = get(a.0);
                vec![(a.0, like(x, vec![g[0]; x.len()]))]
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                let x = get(a.0);
                let (r, c) = (x.rows(), x.cols());
                let scale = match (&self.nodes[id], axis) {
                    (Op::MeanAxis(..), Axis::Rows) => 1.0 / r as f64,
                    (Op::MeanAxis(..), Axis::Cols) => 1.0 / c as f64,
                    _ => 1.0,
                };
                let mut data = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        data[i * c + j] = scale * if *axis == Axis::Rows { g[j] } else { g[i] };
                    }
                }
                vec![(a.0, like(x, data))]
            }
            Op::Scale(a, f) => vec![(a.0, like(grad, g.iter().map(|v| v * f).collect()))],
            Op::AddRow(a, b) => {
                let c = grad.cols();
                let mut row = vec![0.0; c];
                for i in 0..grad.rows() {
                    axpy(1.0, grad.row(i), &mut row);
                }
                vec![(a.0, grad.clone()), (b.0, Array::from_parts(vec![1, c], row))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (xv, gam) = (get(x.0), get(gamma.0));
                let (r, c) = (xv.rows(), xv.cols());
                let mut dx = Vec::with_capacity(r * c);
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    let (xhat, inv_std) = normalize_row(xv.row(i), *eps);
                    let gy = grad.row(i);
                    let dxhat: Vec<f64> = gy.iter().zip(gam.data()).map(|(g, w)| g * w).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                    let mean_dx = dot(&dxhat, &xhat) / c as f64;
                    dx.extend(dxhat.iter().zip(&xhat).map(|(d, h)| inv_std * (d - mean_d - h * mean_dx)));
                    for j in 0..c {
                        dgamma[j] += gy[j] * xhat[j];
                        dbeta[j] += gy[j];
                    }
                }
                vec![
                    (x.0, Array::from_parts(vec![r, c], dx)),
                    (gamma.0, Array::from_parts(vec![1, c], dgamma)),
                    (beta.0, Array::from_parts(vec![1, c], dbeta)),
                ]
            }
            Op::Softmax(a) => {
                let y = get(id);
                let c = y.cols();
                let mut data = Vec::with_capacity(y.len());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), &g[i * c..(i + 1) * c]);
                    let inner = dot(yr, gr);
                    data.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - inner)));
                }
                vec![(a.0, like(y, data))]
            }
            Op::LogSoftmax(a, exclude) => {
                let y = get(id);
                let c = y.cols();
                let included = |k: usize| exclude.as_ref().is_none_or(|m| !m[k]);
                let mut data = vec![0.0; y.len()];
                for i in 0..y.rows() {
                    let total: f64 = (i * c..(i + 1) * c).filter(|&k| included(k)).map(|k| g[k]).sum();
                    for k in (i * c..(i + 1) * c).filter(|&k| included(k)) {
                        data[k] = g[k] - y.data()[k].exp() * total;
                    }
                }
                vec![(a.0, like(y, data))]
            }
            Op::Gelu(a) => {
                let x = get(a.0);
                vec![(a.0, like(x, x.data().iter().zip(g).map(|(&v, g)| g * gelu_derivative(v)).collect()))]
            }
            Op::Exp(a) => {
                let y = get(id);
                vec![(a.0, like(y, y.data().iter().zip(g).map(|(y, g)| y * g).collect()))]
            }
            Op::Log(a) => {
                let x = get(a.0);
                vec![(a.0, like(x, x.data().iter().zip(g).map(|(x, g)| g / x).collect()))]
            }
            Op::SquaredNorm(a) => {
                let x = get(a.0);
                vec![(a.0, like(x, x.data().iter().map(|v| 2.0 * v * g[0]).collect()))]
            }
            Op::Dropout(a, rate) => match self.mode {
                Mode::Eval => vec![(a.0, grad.clone())],
                Mode::Train => {
                    let scales = self.dropout_scales(id, grad.len(), *rate);
                    vec![(a.0, like(grad, g.iter().zip(&scales).map(|(g, s)| g * s).collect()))]
                }
            },
        };
        if let Some((primitive, factor)) = self.fault {
            if self.nodes[id].primitive() == primitive {
                for (_, adj) in &mut out {
                    adj.data_mut().iter_mut().for_each(|v| *v *= factor);
                }
            }
        }
        out
    }
}

/// Cached forward values of one evaluation.
pub struct Evaluation<'a> {
    graph: &'a Graph,
    bindings: &'a Bindings,
    root: NodeId,
    values: Vec<Option<Cow<'a, Array>>>,
    needed: Vec<bool>,
}

impl<'a> Evaluation<'a> {
    pub fn root_value(&self) -> &Array {
        self.value(self.root)
    }

    /// The cached value of a node the root depends on.
    pub fn value(&self, id: NodeId) -> &Array {
        self.values[id.0].as_deref().expect("node is not an ancestor of the evaluated root")
    }

    pub fn try_value(&self, id: NodeId) -> Option<&Array> {
        self.values.get(id.0).and_then(|v| v.as_deref())
    }

    /// Reverse pass from the scalar root to the named leaves. Leaves that do
    /// not influence the root receive zeros shaped like their binding.
    pub fn backward(&self, wrt: &[&str]) -> Result<BTreeMap<String, Array>> {
        let graph = self.graph;
        let root_value = self.root_value();
        if root_value.len() != 1 {
            return Err(Error::NonScalarRoot { shape: root_value.shape().to_vec() });
        }
        let n = self.root.0 + 1;
        let mut requires = vec![false; n];
        for name in wrt {
            if let Some(id) = graph.input_id(name).filter(|id| id.0 < n) {
                requires[id.0] = self.needed[id.0];
            }
        }
        for id in 0..n {
            if self.needed[id] && !requires[id] {
                requires[id] = graph.nodes[id].inputs().iter().any(|i| requires[i.0]);
            }
        }

        let mut adjoint: Vec<Option<Array>> = vec![None; n];
        adjoint[self.root.0] = Some(Array::from_parts(root_value.shape().to_vec(), vec![1.0]));
        let get = |i: usize| -> &Array { self.values[i].as_deref().expect("cached forward value") };
        for id in (0..n).rev() {
            if !requires[id] || matches!(graph.nodes[id], Op::Input(_)) {
                continue;
            }
            let Some(grad) = adjoint[id].take() else { continue };
            for (input, adj) in graph.adjoints(id, &grad, &get) {
                if !requires[input] {
                    continue;
                }
                match &mut adjoint[input] {
                    Some(acc) => axpy(1.0, adj.data(), acc.data_mut()),
                    slot @ None => *slot = Some(adj),
                }
            }
        }

        let mut out = BTreeMap::new();
        for name in wrt {
            let grad = match graph.input_id(name).and_then(|id| adjoint.get_mut(id.0).and_then(Option::take)) {
                Some(g) => g,
                None => {
                    let bound = self.bindings.get(name).ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
                    Array::zeros(bound.shape())
                }
            };
            out.insert(name.to_string(), grad);
        }
        Ok(out)
    }
}

/// Normalized row and `1/sqrt(var + eps)` (population variance).
fn normalize_row(row: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    (row.iter().map(|v| (v - mean) * inv_std).collect(), inv_std)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}
