//! Dense `f64` tensors and reverse-mode differentiation of scalar programs.
//!
//! A [`Graph`] is a straight-line program over a small op set: matrix-vector
//! products, elementwise activations, inner products, sums, stacking scalars
//! into a vector, and the three reductions used by the contrastive losses
//! (vector max, hinge, base-2 logistic). Leaves are named and declared with a
//! fixed shape; values are supplied at evaluation time through [`Bindings`].
//!
//! Graphs are immutable once built, so one graph can be evaluated from many
//! threads with different bindings.
//!
//! Non-differentiable points follow one convention everywhere: the derivative
//! at a kink is 0 (ReLU at 0, hinge at its corner), and vector max routes the
//! gradient to the first maximal index.

use std::collections::HashMap;
use std::f64::consts::LN_2;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("leaf `{0}` is not bound")]
    UnboundLeaf(String),
    #[error("no leaf named `{0}` in graph")]
    UnknownLeaf(String),
    #[error("leaf `{0}` declared twice")]
    DuplicateLeaf(String),
    #[error("graph output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    DanglingNode(usize),
}

/// Row-major dense tensor. A scalar has the empty shape.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}{:?}", self.shape, self.data)
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, DiffError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(DiffError::ShapeMismatch(format!(
                "dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} entries, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    /// A vector of length `data.len()`. Panics on an empty slice.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector tensor");
        Self { shape: vec![data.len()], data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn as_scalar(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    /// Rows of a 2-d tensor (1 for vectors and scalars).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => 1,
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    /// `self * x` for a matrix `self`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(self.cols(), x.len());
        (0..self.rows()).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ * y` for a matrix `self`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols()];
        for (i, &yi) in y.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor { shape: vec![c, r], data }
    }

    pub fn scaled(&self, factor: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Elementwise activation with `σ(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
        }
    }

    /// Derivative at `x`; the kink at 0 takes the lower branch.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
        }
    }

    /// Lipschitz constant `L`.
    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Relu | Activation::Tanh => 1.0,
            Activation::LeakyRelu(a) => a.abs().max(1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf(usize),
    Const(Tensor),
    MatVec(NodeId, NodeId),
    Activation(Activation, NodeId),
    Dot(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(f64, NodeId),
    Sum(Vec<NodeId>),
    Stack(Vec<NodeId>),
    Max(NodeId),
    /// `1 + max_i(-v_i)` without the clamp at zero.
    HingeMargin(NodeId),
    Hinge(NodeId),
    Logistic(NodeId),
    Frobenius(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    leaves: Vec<(String, Vec<usize>)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_of(&self, id: NodeId) -> Result<&[usize], DiffError> {
        self.nodes
            .get(id.0)
            .map(|n| n.shape.as_slice())
            .ok_or(DiffError::DanglingNode(id.0))
    }

    pub fn leaf(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, DiffError> {
        if self.leaves.iter().any(|(n, _)| n == name) {
            return Err(DiffError::DuplicateLeaf(name.to_string()));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(DiffError::ShapeMismatch(format!("leaf `{name}` has a zero dimension")));
        }
        self.leaves.push((name.to_string(), shape.to_vec()));
        Ok(self.push(Op::Leaf(self.leaves.len() - 1), shape.to_vec()))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape.clone();
        self.push(Op::Const(value), shape)
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sx) = (self.shape_of(a)?.to_vec(), self.shape_of(x)?.to_vec());
        if sa.len() != 2 || sx.len() != 1 || sa[1] != sx[0] {
            return Err(DiffError::ShapeMismatch(format!("matvec {sa:?} x {sx:?}")));
        }
        Ok(self.push(Op::MatVec(a, x), vec![sa[0]]))
    }

    pub fn activation(&mut self, kind: Activation, x: NodeId) -> Result<NodeId, DiffError> {
        let s = self.shape_of(x)?.to_vec();
        Ok(self.push(Op::Activation(kind, x), s))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (sa, sb) = (self.shape_of(a)?, self.shape_of(b)?);
        if sa.len() != 1 || sa != sb {
            return Err(DiffError::ShapeMismatch(format!("dot {sa:?} . {sb:?}")));
        }
        Ok(self.push(Op::Dot(a, b), Vec::new()))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<Vec<usize>, DiffError> {
        let (sa, sb) = (self.shape_of(a)?, self.shape_of(b)?);
        if sa != sb {
            return Err(DiffError::ShapeMismatch(format!("{what} {sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add(a, b), s))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let s = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub(a, b), s))
    }

    pub fn scale(&mut self, factor: f64, a: NodeId) -> Result<NodeId, DiffError> {
        let s = self.shape_of(a)?.to_vec();
        Ok(self.push(Op::Scale(factor, a), s))
    }

    pub fn sum(&mut self, items: &[NodeId]) -> Result<NodeId, DiffError> {
        let first = *items
            .first()
            .ok_or_else(|| DiffError::ShapeMismatch("sum of nothing".into()))?;
        for &it in &items[1..] {
            self.same_shape(first, it, "sum")?;
        }
        let s = self.shape_of(first)?.to_vec();
        Ok(self.push(Op::Sum(items.to_vec()), s))
    }

    /// Arithmetic mean of same-shaped nodes.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId, DiffError> {
        let s = self.sum(items)?;
        self.scale(1.0 / items.len() as f64, s)
    }

    /// Stack scalar nodes into a vector.
    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId, DiffError> {
        if scalars.is_empty() {
            return Err(DiffError::ShapeMismatch("stack of nothing".into()));
        }
        for &s in scalars {
            let sh = self.shape_of(s)?;
            if !sh.is_empty() {
                return Err(DiffError::ShapeMismatch(format!("stack needs scalars, got {sh:?}")));
            }
        }
        Ok(self.push(Op::Stack(scalars.to_vec()), vec![scalars.len()]))
    }

    fn vector_reduce(&mut self, v: NodeId, op: Op, what: &str) -> Result<NodeId, DiffError> {
        let s = self.shape_of(v)?;
        if s.len() != 1 {
            return Err(DiffError::ShapeMismatch(format!("{what} needs a vector, got {s:?}")));
        }
        Ok(self.push(op, Vec::new()))
    }

    pub fn max(&mut self, v: NodeId) -> Result<NodeId, DiffError> {
        self.vector_reduce(v, Op::Max(v), "max")
    }

    pub fn hinge(&mut self, v: NodeId) -> Result<NodeId, DiffError> {
        self.vector_reduce(v, Op::Hinge(v), "hinge")
    }

    pub fn hinge_margin(&mut self, v: NodeId) -> Result<NodeId, DiffError> {
        self.vector_reduce(v, Op::HingeMargin(v), "hinge margin")
    }

    pub fn logistic(&mut self, v: NodeId) -> Result<NodeId, DiffError> {
        self.vector_reduce(v, Op::Logistic(v), "logistic")
    }

    pub fn frobenius(&mut self, a: NodeId) -> Result<NodeId, DiffError> {
        self.shape_of(a)?;
        Ok(self.push(Op::Frobenius(a), Vec::new()))
    }

    pub fn finish(self, output: NodeId) -> Result<Graph, DiffError> {
        let s = self.shape_of(output)?;
        if !s.is_empty() {
            return Err(DiffError::NonScalarOutput(s.to_vec()));
        }
        Ok(Graph { nodes: self.nodes, leaves: self.leaves, output })
    }
}

/// Values for the named leaves of a graph.
#[derive(Debug, Default, Clone)]
pub struct Bindings<'a> {
    map: HashMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &'a str, value: &'a Tensor) {
        self.map.insert(name, value);
    }

    pub fn with(mut self, name: &'a str, value: &'a Tensor) -> Self {
        self.insert(name, value);
        self
    }
}

#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    leaves: Vec<(String, Vec<usize>)>,
    output: NodeId,
}

fn first_argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn first_argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `log2(1 + Σ exp(-v_i))`, evaluated stably.
pub fn logistic_value(v: &[f64]) -> f64 {
    // exponents are -shift (for the 1) and -v_i - shift; the largest is 0, and
    // ln_1p over the rest keeps full relative precision when the loss is tiny
    let shift = v.iter().fold(0.0f64, |m, &x| m.max(-x));
    let exps = std::iter::once(-shift).chain(v.iter().map(|&x| -x - shift));
    let top = exps.clone().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, e)| if e > b.1 { (i, e) } else { b }).0;
    let rest: f64 = exps.enumerate().filter(|&(i, _)| i != top).map(|(_, e)| e.exp()).sum();
    (rest.ln_1p() + shift) / LN_2
}

fn logistic_grad(v: &[f64]) -> Vec<f64> {
    let shift = v.iter().fold(0.0f64, |m, &x| m.max(-x));
    let terms: Vec<f64> = v.iter().map(|&x| (-x - shift).exp()).collect();
    let denom = (-shift).exp() + terms.iter().sum::<f64>();
    terms.iter().map(|t| -t / (denom * LN_2)).collect()
}

impl Graph {
    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.iter().map(|(n, _)| n.as_str())
    }

    pub fn leaf_shape(&self, name: &str) -> Option<&[usize]> {
        self.leaves.iter().find(|(n, _)| n == name).map(|(_, s)| s.as_slice())
    }

    fn resolve<'b>(&self, bindings: &Bindings<'b>) -> Result<Vec<&'b Tensor>, DiffError> {
        self.leaves
            .iter()
            .map(|(name, shape)| {
                let t = *bindings
                    .map
                    .get(name.as_str())
                    .ok_or_else(|| DiffError::UnboundLeaf(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(DiffError::ShapeMismatch(format!(
                        "leaf `{name}` declared {shape:?}, bound {:?}",
                        t.shape()
                    )));
                }
                Ok(t)
            })
            .collect()
    }

    fn forward(&self, leaves: &[&Tensor]) -> Vec<Vec<f64>> {
        let mut vals: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match &node.op {
                Op::Leaf(i) => leaves[*i].data.clone(),
                Op::Const(t) => t.data.clone(),
                Op::MatVec(a, x) => {
                    let cols = self.nodes[a.0].shape[1];
                    let (av, xv) = (&vals[a.0], &vals[x.0]);
                    av.chunks_exact(cols).map(|row| dot(row, xv)).collect()
                }
                Op::Activation(k, x) => vals[x.0].iter().map(|&z| k.apply(z)).collect(),
                Op::Dot(a, b) => vec![dot(&vals[a.0], &vals[b.0])],
                Op::Add(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x + y).collect(),
                Op::Sub(a, b) => vals[a.0].iter().zip(&vals[b.0]).map(|(x, y)| x - y).collect(),
                Op::Scale(c, a) => vals[a.0].iter().map(|x| c * x).collect(),
                Op::Sum(items) => {
                    let mut acc = vals[items[0].0].clone();
                    for it in &items[1..] {
                        for (o, x) in acc.iter_mut().zip(&vals[it.0]) {
                            *o += x;
                        }
                    }
                    acc
                }
                Op::Stack(items) => items.iter().map(|it| vals[it.0][0]).collect(),
                Op::Max(v) => {
                    let x = &vals[v.0];
                    vec![x[first_argmax(x)]]
                }
                Op::HingeMargin(v) => {
                    let x = &vals[v.0];
                    vec![1.0 - x[first_argmin(x)]]
                }
                Op::Hinge(v) => {
                    let x = &vals[v.0];
                    vec![(1.0 - x[first_argmin(x)]).max(0.0)]
                }
                Op::Logistic(v) => vec![logistic_value(&vals[v.0])],
                Op::Frobenius(a) => vec![vals[a.0].iter().map(|x| x * x).sum::<f64>().sqrt()],
            };
            vals.push(v);
        }
        vals
    }

    pub fn evaluate(&self, bindings: &Bindings<'_>) -> Result<f64, DiffError> {
        let leaves = self.resolve(bindings)?;
        let vals = self.forward(&leaves);
        Ok(vals[self.output.0][0])
    }

    /// Output value and the gradients with respect to the leaves in `wrt`.
    pub fn value_and_gradient(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<(f64, HashMap<String, Tensor>), DiffError> {
        let wanted: Vec<usize> = wrt
            .iter()
            .map(|name| {
                self.leaves
                    .iter()
                    .position(|(n, _)| n == name)
                    .ok_or_else(|| DiffError::UnknownLeaf((*name).to_string()))
            })
            .collect::<Result<_, _>>()?;
        let leaves = self.resolve(bindings)?;
        let vals = self.forward(&leaves);
        let mut adj: Vec<Vec<f64>> = vals.iter().map(|v| vec![0.0; v.len()]).collect();
        adj[self.output.0][0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            if adj[idx].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut adj[idx]);
            match &self.nodes[idx].op {
                Op::Leaf(_) | Op::Const(_) => {}
                Op::MatVec(a, x) => {
                    let cols = self.nodes[a.0].shape[1];
                    let (av, xv) = (&vals[a.0], &vals[x.0]);
                    for (i, &gi) in g.iter().enumerate() {
                        if gi == 0.0 {
                            continue;
                        }
                        let row = &av[i * cols..(i + 1) * cols];
                        let ga = &mut adj[a.0][i * cols..(i + 1) * cols];
                        for (o, &xj) in ga.iter_mut().zip(xv) {
                            *o += gi * xj;
                        }
                        for (o, &aij) in adj[x.0].iter_mut().zip(row) {
                            *o += gi * aij;
                        }
                    }
                }
                Op::Activation(k, x) => {
                    for ((o, &gi), &z) in adj[x.0].iter_mut().zip(&g).zip(&vals[x.0]) {
                        *o += gi * k.derivative(z);
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    for (o, &bv) in adj[a.0].iter_mut().zip(&vals[b.0]) {
                        *o += s * bv;
                    }
                    for (o, &av) in adj[b.0].iter_mut().zip(&vals[a.0]) {
                        *o += s * av;
                    }
                }
                Op::Add(a, b) => {
                    for (o, &gi) in adj[a.0].iter_mut().zip(&g) {
                        *o += gi;
                    }
                    for (o, &gi) in adj[b.0].iter_mut().zip(&g) {
                        *o += gi;
                    }
                }
                Op::Sub(a, b) => {
                    for (o, &gi) in adj[a.0].iter_mut().zip(&g) {
                        *o += gi;
                    }
                    for (o, &gi) in adj[b.0].iter_mut().zip(&g) {
                        *o -= gi;
                    }
                }
                Op::Scale(c, a) => {
                    for (o, &gi) in adj[a.0].iter_mut().zip(&g) {
                        *o += c * gi;
                    }
                }
                Op::Sum(items) => {
                    for it in items {
                        for (o, &gi) in adj[it.0].iter_mut().zip(&g) {
                            *o += gi;
                        }
                    }
                }
                Op::Stack(items) => {
                    for (it, &gi) in items.iter().zip(&g) {
                        adj[it.0][0] += gi;
                    }
                }
                Op::Max(v) => {
                    let i = first_argmax(&vals[v.0]);
                    adj[v.0][i] += g[0];
                }
                Op::HingeMargin(v) => {
                    let i = first_argmin(&vals[v.0]);
                    adj[v.0][i] -= g[0];
                }
                Op::Hinge(v) => {
                    let x = &vals[v.0];
                    let i = first_argmin(x);
                    if 1.0 - x[i] > 0.0 {
                        adj[v.0][i] -= g[0];
                    }
                }
                Op::Logistic(v) => {
                    for (o, d) in adj[v.0].iter_mut().zip(logistic_grad(&vals[v.0])) {
                        *o += g[0] * d;
                    }
                }
                Op::Frobenius(a) => {
                    let norm = vals[idx][0];
                    if norm > 0.0 {
                        for (o, &x) in adj[a.0].iter_mut().zip(&vals[a.0]) {
                            *o += g[0] * x / norm;
                        }
                    }
                }
            }
            adj[idx] = g;
        }

        let value = vals[self.output.0][0];
        let grads = wanted
            .into_iter()
            .map(|li| {
                let node = self
                    .nodes
                    .iter()
                    .position(|n| matches!(n.op, Op::Leaf(i) if i == li))
                    .expect("every leaf has a node");
                let (name, shape) = &self.leaves[li];
                (
                    name.clone(),
                    Tensor { shape: shape.clone(), data: std::mem::take(&mut adj[node]) },
                )
            })
            .collect();
        Ok((value, grads))
    }

    pub fn gradient(
        &self,
        bindings: &Bindings<'_>,
        wrt: &[&str],
    ) -> Result<HashMap<String, Tensor>, DiffError> {
        self.value_and_gradient(bindings, wrt).map(|(_, g)| g)
    }
}
