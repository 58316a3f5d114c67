//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly when it is recorded, so node values are always available and the
//! node order is a valid topological order. [`Graph::backward`] sweeps the
//! list once in reverse.
//!
//! ```
//! use dftune_core::autodiff::Graph;
//! use dftune_core::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(Tensor::scalar(3.0));
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(g.value(y).item().unwrap(), 9.0);
//! assert_eq!(grads.get(x).item().unwrap(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddRow(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Square(NodeId),
    Clamp(NodeId, f64, f64),
    Minimum(NodeId, NodeId),
    Sum(NodeId),
    SumCols(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Computation graph; owned by a single thread for its lifetime.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `node`; zeros when the output does not depend on it.
    pub fn get(&self, node: NodeId) -> Tensor {
        match &self.grads[node.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[node.0]),
        }
    }

    pub fn get_ref(&self, node: NodeId) -> Option<&Tensor> {
        self.grads[node.0].as_ref()
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

    /// Drops every node recorded after the first `len`, invalidating their ids.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.nodes[node.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, a: NodeId) -> bool {
        self.nodes[a.0].requires_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value, false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), v, rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), v, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), v, rg))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(Op::Scale(a, s), v, rg)
    }

    /// Adds the rank-1 `bias` to every row of the matrix `a`.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(bias));
        if av.shape().len() != 2 || bv.len() != av.cols() {
            return Err(Error::shape("add_row", av.shape(), bv.shape()));
        }
        let cols = av.cols();
        let mut v = av.clone();
        for row in v.data_mut().chunks_mut(cols) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Op::AddRow(a, bias), v, rg))
    }

    /// `x (n x k) * w^T` with `w` shaped `m x k`.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let v = self.value(x).matmul_t(self.value(w))?;
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Op::MatMulT(x, w), v, rg))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(Op::Tanh(a), v, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(Op::Exp(a), v, rg)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(Op::Square(a), v, rg)
    }

    /// Elementwise clamp; the gradient is zero where the input was clipped.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        let rg = self.rg(a);
        self.push(Op::Clamp(a, lo, hi), v, rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), "minimum", f64::min)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Minimum(a, b), v, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(Op::Sum(a), v, rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums of a matrix: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (n, cols) = (av.rows(), av.cols());
        let data: Vec<f64> = av.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let v = Tensor::matrix(n, 1, data).expect("row sums");
        let rg = self.rg(a);
        self.push(Op::SumCols(a), v, rg)
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, node {} has shape {:?}",
                output.0,
                out.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match node.op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, a, g.clone())?;
                    self.accumulate(&mut grads, b, g.clone())?;
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, a, g.clone())?;
                    self.accumulate(&mut grads, b, g.map(|x| -x))?;
                }
                Op::Mul(a, b) => {
                    if self.rg(a) {
                        let ga = g.zip_map(self.value(b), "mul'", |x, y| x * y)?;
                        self.accumulate(&mut grads, a, ga)?;
                    }
                    if self.rg(b) {
                        let gb = g.zip_map(self.value(a), "mul'", |x, y| x * y)?;
                        self.accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Scale(a, s) => self.accumulate(&mut grads, a, g.map(|x| x * s))?,
                Op::AddRow(a, bias) => {
                    if self.rg(bias) {
                        let cols = g.cols();
                        let mut gb = vec![0.0; cols];
                        for row in g.data().chunks(cols) {
                            for (acc, x) in gb.iter_mut().zip(row) {
                                *acc += x;
                            }
                        }
                        let shape = self.value(bias).shape().to_vec();
                        self.accumulate(&mut grads, bias, Tensor::new(shape, gb)?)?;
                    }
                    self.accumulate(&mut grads, a, g.clone())?;
                }
                Op::MatMulT(x, w) => {
                    if self.rg(x) {
                        let gx = g.matmul(self.value(w))?;
                        self.accumulate(&mut grads, x, gx)?;
                    }
                    if self.rg(w) {
                        let gw = g.t_matmul(self.value(x))?;
                        self.accumulate(&mut grads, w, gw)?;
                    }
                }
                Op::Tanh(a) => {
                    let ga = g.zip_map(&node.value, "tanh'", |x, y| x * (1.0 - y * y))?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Exp(a) => {
                    let ga = g.zip_map(&node.value, "exp'", |x, y| x * y)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Square(a) => {
                    let ga = g.zip_map(self.value(a), "square'", |x, y| 2.0 * x * y)?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Clamp(a, lo, hi) => {
                    let ga = g.zip_map(
                        self.value(a),
                        "clamp'",
                        |x, y| {
                            if (lo..=hi).contains(&y) {
                                x
                            } else {
                                0.0
                            }
                        },
                    )?;
                    self.accumulate(&mut grads, a, ga)?;
                }
                Op::Minimum(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    if self.rg(a) {
                        let mut ga = g.clone();
                        for ((x, &p), &q) in ga.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if p > q {
                                *x = 0.0;
                            }
                        }
                        self.accumulate(&mut grads, a, ga)?;
                    }
                    if self.rg(b) {
                        let mut gb = g.clone();
                        for ((x, &p), &q) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if p <= q {
                                *x = 0.0;
                            }
                        }
                        self.accumulate(&mut grads, b, gb)?;
                    }
                }
                Op::Sum(a) => {
                    let s = g.item()?;
                    let shape = self.value(a).shape().to_vec();
                    self.accumulate(&mut grads, a, Tensor::full(&shape, s))?;
                }
                Op::SumCols(a) => {
                    let av = self.value(a);
                    let cols = av.cols();
                    let mut ga = Tensor::zeros(av.shape());
                    for (row, &gi) in ga.data_mut().chunks_mut(cols).zip(g.data()) {
                        row.fill(gi);
                    }
                    self.accumulate(&mut grads, a, ga)?;
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: NodeId, g: Tensor) -> Result<()> {
        if !self.rg(target) {
            return Ok(());
        }
        match &mut grads[target.0] {
            Some(acc) => {
                acc.same_shape(&g, "accumulate")?;
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
        Ok(())
    }
}

/// Evaluates `output` and its gradients in one call.
pub fn forward_backward(graph: &Graph, output: NodeId) -> Result<(f64, Gradients)> {
    let grads = graph.backward(output)?;
    Ok((graph.value(output).item()?, grads))
}
