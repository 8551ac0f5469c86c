//! Minimal define-by-run reverse-mode automatic differentiation over dense
//! `f64` tensors.
//!
//! A [`Graph`] records every kernel application in creation order. Leaves are
//! created with [`Graph::param`] (differentiable) or [`Graph::constant`].
//! Calling [`Graph::backward`] on a scalar node walks the recorded nodes in
//! exact reverse order and returns a [`Gradients`] table. A graph can be
//! differentiated once; build a fresh graph for every forward pass.
//!
//! Broadcasting is limited to scalar-with-tensor for the elementwise kernels.
//!
//! ```
//! use causal_reweight::autodiff::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = g.square(x).unwrap();
//! let loss = g.sum(sq).unwrap();
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
//! ```

use crate::binarize::{self, BinarizeKind, BinarizeMode};
use crate::error::{Error, Result};
use rand::Rng;

/// Denominators smaller than this in magnitude are rejected by `Div`.
pub const DIVISION_GUARD: f64 = 1e-12;

/// Dense row-major array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor shape must be a non-empty sequence of positive dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Contract(format!(
                "shape {shape:?} holds {expected} values but {} were supplied",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// `n x 1` column.
    pub fn column(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "column must be non-empty");
        Self {
            shape: vec![data.len(), 1],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::filled(shape, 1.0)
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
        self.data.len() == 1
    }

    /// First element; intended for scalar tensors.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1]
        } else {
            1
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Identifier of a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable kernels understood by [`Graph::apply`].
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sum,
    Square,
    Scale(f64),
    ColumnSelect(usize),
    ColumnConcat,
    /// Per-row negative log-likelihood of `softmax(logits)` at the given
    /// labels. Output is `n x 1`.
    SoftmaxCrossEntropy(Vec<usize>),
    Transpose,
    /// 0/1 indicator with a clipped straight-through backward rule. Through
    /// `apply` the forward pass is deterministic; use [`Graph::binarize`]
    /// for the stochastic variant.
    Binarize { ste_clip: f64 },
}

impl Kernel {
    pub fn name(&self) -> &'static str {
        match self {
            Kernel::MatMul => "matmul",
            Kernel::Add => "add",
            Kernel::Sub => "subtract",
            Kernel::Mul => "multiply",
            Kernel::Div => "divide",
            Kernel::Relu => "relu",
            Kernel::Sum => "sum",
            Kernel::Square => "square",
            Kernel::Scale(_) => "scale",
            Kernel::ColumnSelect(_) => "column_select",
            Kernel::ColumnConcat => "column_concat",
            Kernel::SoftmaxCrossEntropy(_) => "softmax_cross_entropy",
            Kernel::Transpose => "transpose",
            Kernel::Binarize { .. } => "binarize",
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Kernel(Kernel),
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation. Nodes are stored in creation order, which is also a
/// topological order because inputs must exist before a node is created.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by one backward pass, indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zeros when `id` was not
    /// reachable from the loss.
    pub fn get(&self, id: NodeId) -> Tensor {
        match &self.grads[id.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Tensor {
        match self.grads[id.0].take() {
            Some(t) => t,
            None => Tensor::zeros(self.shapes[id.0].clone()),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor, requires_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        id
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Leaf, Vec::new(), t, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Applies `kernel` to `inputs`, recording a node.
    pub fn apply(&mut self, kernel: Kernel, inputs: &[NodeId]) -> Result<NodeId> {
        self.check_open()?;
        let arity = match kernel {
            Kernel::MatMul | Kernel::Add | Kernel::Sub | Kernel::Mul | Kernel::Div => Some(2),
            Kernel::ColumnConcat => None,
            _ => Some(1),
        };
        match arity {
            Some(k) if inputs.len() != k => {
                return Err(Error::Contract(format!(
                    "{} expects {k} inputs, got {}",
                    kernel.name(),
                    inputs.len()
                )))
            }
            None if inputs.is_empty() => {
                return Err(Error::Contract(format!("{} expects at least one input", kernel.name())))
            }
            _ => {}
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = forward(&kernel, &values)?;
        if !out.is_finite() {
            return Err(Error::Evaluation(format!("{} produced a non-finite value", kernel.name())));
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        Ok(self.push(Op::Kernel(kernel), inputs.to_vec(), out, requires_grad))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Kernel::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Mul, &[a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Div, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Relu, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Sum, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Square, &[a])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(Kernel::Scale(factor), &[a])
    }

    pub fn column_select(&mut self, a: NodeId, col: usize) -> Result<NodeId> {
        self.apply(Kernel::ColumnSelect(col), &[a])
    }

    pub fn column_concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(Kernel::ColumnConcat, parts)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.apply(Kernel::SoftmaxCrossEntropy(labels.to_vec()), &[logits])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(Kernel::Transpose, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// Binarizes `z` into a 0/1 indicator according to `mode`. The rng is
    /// only consumed in stochastic mode.
    pub fn binarize<R: Rng + ?Sized>(&mut self, z: NodeId, mode: &BinarizeMode, rng: &mut R) -> Result<NodeId> {
        self.check_open()?;
        let out = match mode.kind {
            BinarizeKind::Deterministic => binarize::binarize_deterministic(self.value(z))?,
            BinarizeKind::Stochastic => binarize::binarize_stochastic(self.value(z), rng)?,
        };
        let requires_grad = self.nodes[z.0].requires_grad;
        Ok(self.push(
            Op::Kernel(Kernel::Binarize {
                ste_clip: mode.ste_clip,
            }),
            vec![z],
            out,
            requires_grad,
        ))
    }

    fn check_open(&self) -> Result<()> {
        if self.consumed {
            return Err(Error::Lifecycle(
                "graph was already differentiated; build a new graph for the next forward pass".into(),
            ));
        }
        Ok(())
    }

    /// Reverse pass from the scalar `loss`. Consumes the graph: a second call
    /// (or any further kernel application) fails with a lifecycle error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients> {
        self.check_open()?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_value.shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(loss_value.shape().to_vec()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let kernel = match &node.op {
                Op::Leaf => continue,
                Op::Kernel(k) => k,
            };
            let Some(upstream) = grads[idx].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let input_grads = vjp(kernel, &inputs, &node.value, &upstream)?;
            for (input, g) in node.inputs.iter().zip(input_grads) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, v) in acc.data.iter_mut().zip(&g.data) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape.clone()).collect();
        // Interior gradients were consumed above; only differentiable leaves
        // are reported.
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }
}

fn dim_err(kernel: &Kernel, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        kernel: kernel.name(),
        left: a.shape.clone(),
        right: b.shape.clone(),
    }
}

fn require_2d(kernel: &Kernel, a: &Tensor) -> Result<()> {
    if a.shape.len() != 2 {
        return Err(Error::Dimension {
            kernel: kernel.name(),
            left: a.shape.clone(),
            right: vec![],
        });
    }
    Ok(())
}

/// Elementwise binary op with scalar broadcasting.
fn zip_broadcast(kernel: &Kernel, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor {
            shape: a.shape.clone(),
            data,
        })
    } else if b.len() == 1 {
        let y = b.data[0];
        Ok(a.map(|x| f(x, y)))
    } else if a.len() == 1 {
        let x = a.data[0];
        Ok(b.map(|y| f(x, y)))
    } else {
        Err(dim_err(kernel, a, b))
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn forward(kernel: &Kernel, x: &[&Tensor]) -> Result<Tensor> {
    match kernel {
        Kernel::MatMul => {
            let (a, b) = (x[0], x[1]);
            require_2d(kernel, a)?;
            require_2d(kernel, b)?;
            if a.shape[1] != b.shape[0] {
                return Err(dim_err(kernel, a, b));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            Ok(Tensor {
                shape: vec![m, n],
                data: matmul_raw(&a.data, &b.data, m, k, n),
            })
        }
        Kernel::Add => zip_broadcast(kernel, x[0], x[1], |a, b| a + b),
        Kernel::Sub => zip_broadcast(kernel, x[0], x[1], |a, b| a - b),
        Kernel::Mul => zip_broadcast(kernel, x[0], x[1], |a, b| a * b),
        Kernel::Div => {
            let (a, b) = (x[0], x[1]);
            if let Some((index, &value)) = b.data.iter().enumerate().find(|(_, v)| v.abs() < DIVISION_GUARD) {
                return Err(Error::DivisionGuard {
                    kernel: kernel.name(),
                    index,
                    value,
                });
            }
            zip_broadcast(kernel, a, b, |a, b| a / b)
        }
        Kernel::Relu => Ok(x[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        Kernel::Sum => Ok(Tensor::scalar(x[0].data.iter().sum())),
        Kernel::Square => Ok(x[0].map(|v| v * v)),
        Kernel::Scale(c) => {
            let c = *c;
            Ok(x[0].map(|v| c * v))
        }
        Kernel::ColumnSelect(col) => {
            let a = x[0];
            require_2d(kernel, a)?;
            if *col >= a.shape[1] {
                return Err(Error::Dimension {
                    kernel: kernel.name(),
                    left: a.shape.clone(),
                    right: vec![*col],
                });
            }
            let cols = a.shape[1];
            let data = (0..a.shape[0]).map(|r| a.data[r * cols + col]).collect();
            Ok(Tensor {
                shape: vec![a.shape[0], 1],
                data,
            })
        }
        Kernel::ColumnConcat => {
            for t in x {
                require_2d(kernel, t)?;
                if t.shape[0] != x[0].shape[0] {
                    return Err(dim_err(kernel, x[0], t));
                }
            }
            let rows = x[0].shape[0];
            let total: usize = x.iter().map(|t| t.shape[1]).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in x {
                    let c = t.shape[1];
                    data.extend_from_slice(&t.data[r * c..(r + 1) * c]);
                }
            }
            Ok(Tensor {
                shape: vec![rows, total],
                data,
            })
        }
        Kernel::SoftmaxCrossEntropy(labels) => {
            let logits = x[0];
            require_2d(kernel, logits)?;
            let (n, k) = (logits.shape[0], logits.shape[1]);
            if labels.len() != n {
                return Err(Error::Dimension {
                    kernel: kernel.name(),
                    left: logits.shape.clone(),
                    right: vec![labels.len()],
                });
            }
            let mut data = Vec::with_capacity(n);
            for (i, &y) in labels.iter().enumerate() {
                if y >= k {
                    return Err(Error::Data(format!("label {y} of sample {i} is outside [0, {k})")));
                }
                let row = &logits.data[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                data.push(lse - row[y]);
            }
            Ok(Tensor {
                shape: vec![n, 1],
                data,
            })
        }
        Kernel::Transpose => {
            let a = x[0];
            require_2d(kernel, a)?;
            let (r, c) = (a.shape[0], a.shape[1]);
            Ok(Tensor {
                shape: vec![c, r],
                data: transpose_raw(&a.data, r, c),
            })
        }
        Kernel::Binarize { .. } => binarize::binarize_deterministic(x[0]),
    }
}

/// Reduces a broadcast gradient back to the shape of the scalar operand.
fn unbroadcast(g: Tensor, target: &Tensor) -> Tensor {
    if g.shape == target.shape {
        g
    } else {
        Tensor {
            shape: target.shape.clone(),
            data: vec![g.data.iter().sum()],
        }
    }
}

/// Vector-Jacobian product: gradients of each input given the upstream
/// gradient of the output.
fn vjp(kernel: &Kernel, x: &[&Tensor], out: &Tensor, up: &Tensor) -> Result<Vec<Option<Tensor>>> {
    let grads = match kernel {
        Kernel::MatMul => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let bt = transpose_raw(&b.data, k, n);
            let at = transpose_raw(&a.data, m, k);
            let ga = matmul_raw(&up.data, &bt, m, n, k);
            let gb = matmul_raw(&at, &up.data, k, m, n);
            vec![
                Some(Tensor {
                    shape: a.shape.clone(),
                    data: ga,
                }),
                Some(Tensor {
                    shape: b.shape.clone(),
                    data: gb,
                }),
            ]
        }
        Kernel::Add | Kernel::Sub => {
            let sign = if matches!(kernel, Kernel::Sub) { -1.0 } else { 1.0 };
            let ga = unbroadcast(up.clone(), x[0]);
            let gb = unbroadcast(up.map(|v| sign * v), x[1]);
            vec![Some(ga), Some(gb)]
        }
        Kernel::Mul => {
            let (a, b) = (x[0], x[1]);
            let ga = zip_broadcast(kernel, up, b, |u, bv| u * bv)?;
            let gb = zip_broadcast(kernel, up, a, |u, av| u * av)?;
            vec![Some(unbroadcast(ga, a)), Some(unbroadcast(gb, b))]
        }
        Kernel::Div => {
            let (a, b) = (x[0], x[1]);
            let ga = zip_broadcast(kernel, up, b, |u, bv| u / bv)?;
            // d(a/b)/db = -out / b
            let ratio = zip_broadcast(kernel, out, b, |o, bv| -o / bv)?;
            let gb = zip_broadcast(kernel, up, &ratio, |u, r| u * r)?;
            vec![Some(unbroadcast(ga, a)), Some(unbroadcast(gb, b))]
        }
        Kernel::Relu => {
            let a = x[0];
            let data = a
                .data
                .iter()
                .zip(&up.data)
                .map(|(&v, &u)| if v > 0.0 { u } else { 0.0 })
                .collect();
            vec![Some(Tensor {
                shape: a.shape.clone(),
                data,
            })]
        }
        Kernel::Sum => vec![Some(Tensor::filled(x[0].shape.clone(), up.data[0]))],
        Kernel::Square => {
            let a = x[0];
            let data = a.data.iter().zip(&up.data).map(|(&v, &u)| 2.0 * v * u).collect();
            vec![Some(Tensor {
                shape: a.shape.clone(),
                data,
            })]
        }
        Kernel::Scale(c) => {
            let c = *c;
            vec![Some(up.map(|u| c * u))]
        }
        Kernel::ColumnSelect(col) => {
            let a = x[0];
            let cols = a.shape[1];
            let mut g = Tensor::zeros(a.shape.clone());
            for r in 0..a.shape[0] {
                g.data[r * cols + col] = up.data[r];
            }
            vec![Some(g)]
        }
        Kernel::ColumnConcat => {
            let rows = x[0].shape[0];
            let total = out.shape[1];
            let mut offset = 0;
            let mut grads = Vec::with_capacity(x.len());
            for t in x {
                let c = t.shape[1];
                let mut data = Vec::with_capacity(rows * c);
                for r in 0..rows {
                    data.extend_from_slice(&up.data[r * total + offset..r * total + offset + c]);
                }
                offset += c;
                grads.push(Some(Tensor {
                    shape: t.shape.clone(),
                    data,
                }));
            }
            grads
        }
        Kernel::SoftmaxCrossEntropy(labels) => {
            let logits = x[0];
            let k = logits.shape[1];
            let mut data = vec![0.0; logits.len()];
            for (i, &y) in labels.iter().enumerate() {
                let row = &logits.data[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for j in 0..k {
                    let p = exps[j] / z;
                    let target = if j == y { 1.0 } else { 0.0 };
                    data[i * k + j] = up.data[i] * (p - target);
                }
            }
            vec![Some(Tensor {
                shape: logits.shape.clone(),
                data,
            })]
        }
        Kernel::Transpose => {
            let (r, c) = (x[0].shape[0], x[0].shape[1]);
            vec![Some(Tensor {
                shape: x[0].shape.clone(),
                data: transpose_raw(&up.data, c, r),
            })]
        }
        Kernel::Binarize { ste_clip } => {
            let mode = BinarizeMode {
                kind: BinarizeKind::Deterministic,
                ste_clip: *ste_clip,
            };
            vec![Some(binarize::ste_backward(up, x[0], &mode)?)]
        }
    };
    Ok(grads)
}

/// Central finite-difference gradient of `f` at `params` with step `h`.
///
/// Each entry is `(f(p + h e_i) - f(p - h e_i)) / 2h`.
pub fn finite_diff<F>(mut f: F, params: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let plus = f(&probe)?;
        probe.data[i] = orig - h;
        let minus = f(&probe)?;
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation(format!(
                "objective is not finite while perturbing entry {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(Tensor {
        shape: params.shape.clone(),
        data: out,
    })
}

/// Largest elementwise relative error between two gradients, using
/// `|a - b| / max(|a|, |b|, floor)` so entries that are both near zero do
/// not blow up the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(m(2, 2, &[1.0, 1.0, 1.0, 1.0]));
        let c = g.add(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(a).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(vec![2, 3]));
        let b = g.constant(Tensor::ones(vec![3, 2]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 2]);
        assert_eq!(g.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn shape_mismatch_names_kernel_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::ones(vec![2, 3]));
        let b = g.constant(Tensor::ones(vec![2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::ones(vec![3]));
        assert!(matches!(g.add(a, c), Err(Error::Dimension { kernel: "add", .. })));
    }

    #[test]
    fn scalar_broadcast_only() {
        let mut g = Graph::new();
        let a = g.param(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let s = g.param(Tensor::scalar(2.0));
        let p = g.mul(a, s).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 4.0, 6.0, 8.0]);
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(s).data(), &[10.0]);
        assert_eq!(grads.get(a).data(), &[2.0; 4]);
    }

    #[test]
    fn division_guard() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 1e-13]));
        assert!(matches!(g.div(a, b), Err(Error::DivisionGuard { index: 1, .. })));
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = g.square(x).unwrap();
        let l = g.sum(s).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_function_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let z = g.scale(x, 0.0).unwrap();
        let l = g.sum(z).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[0.0; 3]);
    }

    #[test]
    fn unreachable_param_gets_zeros() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let y = g.param(Tensor::vector(vec![5.0, 6.0, 7.0]));
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(y).data(), &[0.0; 3]);
    }

    #[test]
    fn reuse_accumulates() {
        // loss = sum(x * x) + sum(x)  ->  2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, -3.0]));
        let xx = g.mul(x, x).unwrap();
        let a = g.sum(xx).unwrap();
        let b = g.sum(x).unwrap();
        let l = g.add(a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, -5.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn second_backward_is_lifecycle_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]));
        let l = g.sum(x).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Lifecycle(_))));
        assert!(matches!(g.relu(x), Err(Error::Lifecycle(_))));
    }

    #[test]
    fn softmax_ce_stable_for_large_logits() {
        let mut g = Graph::new();
        let z = g.constant(m(1, 2, &[1000.0, 0.0]));
        let ce = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!(g.value(ce).item().abs() < 1e-12);
    }

    #[test]
    fn column_ops_round_trip() {
        let mut g = Graph::new();
        let a = g.param(m(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let c0 = g.column_select(a, 0).unwrap();
        let c2 = g.column_select(a, 2).unwrap();
        let cat = g.column_concat(&[c2, c0]).unwrap();
        assert_eq!(g.value(cat).data(), &[3.0, 1.0, 6.0, 4.0]);
        let l = g.sum(cat).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).data(), &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn finite_diff_quadratic() {
        let p = Tensor::vector(vec![3.0]);
        let est = finite_diff(|t| Ok(t.data()[0] * t.data()[0]), &p, 1e-5).unwrap();
        assert!((est.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let p = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let est = finite_diff(|_| Ok(4.2), &p, 1e-5).unwrap();
        assert_eq!(est.data(), &[0.0; 3]);
    }

    #[test]
    fn finite_diff_rejects_non_finite() {
        let p = Tensor::vector(vec![1.0]);
        assert!(matches!(finite_diff(|_| Ok(f64::NAN), &p, 1e-5), Err(Error::Evaluation(_))));
        assert!(matches!(finite_diff(|_| Ok(1.0), &p, 0.0), Err(Error::Contract(_))));
    }
}
