use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::tensor::{Precision, Tensor};
use super::AutodiffError;

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

/// Elementwise binary operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    Transpose,
    Binary { op: BinaryOp, broadcast: bool },
    Activation(Activation),
    Softmax,
    ConcatRows { rows: Vec<usize> },
    ReduceSum,
    SumRows,
    Scale(f64),
    RsqrtEps,
    Reshape,
    BceWithLogits { target: f64 },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
}

/// Handle to a node of a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    id: usize,
}

impl Var {
    /// Insertion index inside the owning graph.
    pub fn id(self) -> usize {
        self.id
    }
}

/// Append-only define-by-run computation graph.
///
/// Nodes are stored in insertion order, which is also a topological order:
/// every parent precedes its children. A graph is owned by a single worker
/// and rebuilt for every optimization step.
#[derive(Debug)]
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts an input tensor. Values are rounded to the graph precision.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let value = self.precision.round_tensor(value);
        self.push_unchecked(Op::Leaf, Vec::new(), value, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Forward value of `v`.
    ///
    /// Panics when `v` belongs to another graph.
    pub fn value(&self, v: Var) -> &Tensor {
        let idx = self.index(v).expect("variable belongs to a different graph");
        &self.nodes[idx].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.index(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn index(&self, v: Var) -> Result<usize, AutodiffError> {
        if v.graph != self.id || v.id >= self.nodes.len() {
            return Err(AutodiffError::DetachedNode);
        }
        Ok(v.id)
    }

    fn push_unchecked(&mut self, op: Op, parents: Vec<usize>, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Var { graph: self.id, id }
    }

    fn push(&mut self, op: Op, parents: Vec<usize>, value: Tensor) -> Var {
        #[cfg(debug_assertions)]
        {
            let inputs_finite = parents.iter().all(|&p| self.nodes[p].value.is_finite());
            debug_assert!(
                !inputs_finite || value.is_finite(),
                "{op:?} produced a non-finite value from finite inputs"
            );
        }
        let requires_grad = parents.iter().any(|&p| self.nodes[p].requires_grad);
        self.push_unchecked(op, parents, value, requires_grad)
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let out = kernels::matmul(self.precision, ta, tb);
        Ok(self.push(Op::MatMul, vec![ia, ib], out))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let ia = self.index(a)?;
        let ta = &self.nodes[ia].value;
        if ta.rank() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: ta.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = ta.transpose();
        Ok(self.push(Op::Transpose, vec![ia], out))
    }

    /// Elementwise `a op b`. `b` may be a `[n]` or `[1, n]` row broadcast
    /// over the rows of an `[m, n]` matrix `a`.
    pub fn elementwise(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var, AutodiffError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let broadcast = if ta.shape() == tb.shape() {
            false
        } else if ta.rank() == 2 && tb.rows() == 1 && tb.rank() >= 1 && tb.cols() == ta.cols() {
            true
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op: "elementwise",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let out = if broadcast {
            kernels::zip_map_rows(self.precision, ta, tb, f)
        } else {
            kernels::zip_map(self.precision, ta, tb, f)
        };
        Ok(self.push(Op::Binary { op, broadcast }, vec![ia, ib], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(a, b, BinaryOp::Mul)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let p = self.precision;
        let tx = &self.nodes[ix].value;
        let out = match kind {
            Activation::Relu => kernels::map(p, tx, |v| if v > 0.0 { v } else { 0.0 }),
            Activation::Tanh => kernels::map(p, tx, f64::tanh),
            Activation::Sigmoid => kernels::map(p, tx, kernels::sigmoid),
        };
        Ok(self.push(Op::Activation(kind), vec![ix], out))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, AutodiffError> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Softmax over every element of `x`; the output keeps `x`'s shape.
    pub fn softmax_vec(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let tx = &self.nodes[ix].value;
        if tx.numel() == 0 {
            return Err(AutodiffError::Empty("softmax_vec"));
        }
        let out = kernels::softmax(self.precision, tx);
        Ok(self.push(Op::Softmax, vec![ix], out))
    }

    /// Stacks rank-2 parts sharing a column count, in list order.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(AutodiffError::Empty("concat_rows"));
        }
        let ids = parts
            .iter()
            .map(|&v| self.index(v))
            .collect::<Result<Vec<_>, _>>()?;
        let cols = self.nodes[ids[0]].value.cols();
        let mut rows = Vec::with_capacity(ids.len());
        let mut data = Vec::new();
        for &i in &ids {
            let t = &self.nodes[i].value;
            if t.rank() != 2 || t.cols() != cols {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: self.nodes[ids[0]].value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows.push(t.rows());
            data.extend_from_slice(t.data());
        }
        let total = rows.iter().sum::<usize>();
        let out = Tensor::new(&[total, cols], data)?;
        Ok(self.push(Op::ConcatRows { rows }, ids, out))
    }

    /// Sum of all elements as a scalar.
    pub fn reduce_sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let s = kernels::reduce_sum(self.precision, &self.nodes[ix].value);
        Ok(self.push(Op::ReduceSum, vec![ix], Tensor::scalar(s)))
    }

    /// Column sums of a matrix, as a `[cols]` vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let out = kernels::sum_rows(self.precision, &self.nodes[ix].value);
        Ok(self.push(Op::SumRows, vec![ix], out))
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let out = kernels::map(self.precision, &self.nodes[ix].value, |v| v * c);
        Ok(self.push(Op::Scale(c), vec![ix], out))
    }

    /// `(x + eps)^(-1/2)`.
    pub fn rsqrt_eps(&mut self, x: Var, eps: f64) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let p = self.precision;
        let out = kernels::map(p, &self.nodes[ix].value, |v| 1.0 / p.round(p.round(v + eps).sqrt()));
        Ok(self.push(Op::RsqrtEps, vec![ix], out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let ix = self.index(x)?;
        let out = self.nodes[ix].value.reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![ix], out))
    }

    /// Binary cross-entropy of a single logit against `target`, in the
    /// overflow-free form `max(z,0) − z·y + ln(1 + e^(−|z|))`.
    pub fn bce_with_logits(&mut self, logit: Var, target: f64) -> Result<Var, AutodiffError> {
        let ix = self.index(logit)?;
        let z = self.nodes[ix]
            .value
            .item()
            .ok_or_else(|| AutodiffError::NotScalar(self.nodes[ix].value.shape().to_vec()))?;
        let loss = self.precision.round(kernels::bce_with_logits(z, target));
        Ok(self.push(Op::BceWithLogits { target }, vec![ix], Tensor::scalar(loss)))
    }

    /// Reverse-mode gradients of a scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        BackwardState::new(self, loss)?.finish(self)
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `up`,
    /// one entry per parent slot.
    fn local_grads(&self, idx: usize, up: &Tensor) -> Vec<Tensor> {
        let node = &self.nodes[idx];
        let p = self.precision;
        let parent = |slot: usize| &self.nodes[node.parents[slot]].value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul => vec![
                kernels::matmul_nt(p, up, parent(1)),
                kernels::matmul_tn(p, parent(0), up),
            ],
            Op::Transpose => vec![up.transpose()],
            Op::Binary { op, broadcast } => {
                let (a, b) = (parent(0), parent(1));
                let (ga, gb_full) = match op {
                    BinaryOp::Add => (up.clone(), up.clone()),
                    BinaryOp::Sub => (up.clone(), kernels::map(p, up, |v| -v)),
                    BinaryOp::Mul => {
                        let ga = if *broadcast {
                            kernels::zip_map_rows(p, up, b, |u, y| u * y)
                        } else {
                            kernels::zip_map(p, up, b, |u, y| u * y)
                        };
                        (ga, kernels::zip_map(p, up, a, |u, x| u * x))
                    }
                };
                let gb = if *broadcast {
                    kernels::sum_rows(p, &gb_full)
                        .reshape(b.shape())
                        .expect("broadcast grad shape")
                } else {
                    gb_full
                };
                vec![ga, gb]
            }
            Op::Activation(kind) => {
                let g = match kind {
                    Activation::Relu => {
                        kernels::zip_map(p, up, parent(0), |u, x| if x > 0.0 { u } else { 0.0 })
                    }
                    Activation::Tanh => kernels::zip_map(p, up, &node.value, |u, y| u * (1.0 - y * y)),
                    Activation::Sigmoid => {
                        kernels::zip_map(p, up, &node.value, |u, y| u * (y * (1.0 - y)))
                    }
                };
                vec![g]
            }
            Op::Softmax => {
                let y = &node.value;
                let dot = kernels::reduce_sum(p, &kernels::zip_map(p, up, y, |u, s| u * s));
                vec![kernels::zip_map(p, up, y, |u, s| s * (u - dot))]
            }
            Op::ConcatRows { rows } => {
                let mut start = 0;
                rows.iter()
                    .map(|&r| {
                        let part = up.slice_rows(start, r).expect("concat split");
                        start += r;
                        part
                    })
                    .collect()
            }
            Op::ReduceSum => {
                let u = up.item().expect("scalar upstream");
                vec![Tensor::full(parent(0).shape(), u)]
            }
            Op::SumRows => vec![kernels::broadcast_rows(up, parent(0).shape())],
            Op::Scale(c) => vec![kernels::map(p, up, |u| u * c)],
            Op::RsqrtEps => {
                vec![kernels::zip_map(p, up, &node.value, |u, y| u * (-0.5 * y * y * y))]
            }
            Op::Reshape => vec![up.reshape(parent(0).shape()).expect("reshape grad")],
            Op::BceWithLogits { target } => {
                let z = parent(0).item().expect("scalar logit");
                let u = up.item().expect("scalar upstream");
                let g = p.round(u * (kernels::sigmoid(z) - target));
                vec![Tensor::new(parent(0).shape(), vec![g]).expect("logit shape")]
            }
        }
    }
}

/// Gradients produced by a completed backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    graph: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a path to the
    /// loss and requires grad.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`] but substitutes zeros shaped like `v`.
    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros_like(graph.value(v)))
    }
}

/// Key for the seed contribution of the loss itself; orders after every
/// real consumer.
const SEED_KEY: usize = usize::MAX;

/// A resumable reverse sweep over a [`Graph`].
///
/// Nodes are finalized strictly in reverse insertion order. Each node's
/// incoming contributions are summed as a left fold ordered by consumer
/// id, so the result does not depend on visit bookkeeping. The sweep can
/// be paused with [`run_until`](Self::run_until), have extra upstream
/// gradient [`inject`](Self::inject)ed into not-yet-finalized nodes, and
/// then resumed; this lets a worker splice gradient that arrives from
/// other workers into the middle of its own backward pass.
#[derive(Debug)]
pub struct BackwardState {
    graph: u64,
    cursor: usize,
    pending: Vec<Vec<(usize, Tensor)>>,
    grads: Vec<Option<Tensor>>,
}

impl BackwardState {
    pub fn new(graph: &Graph, loss: Var) -> Result<Self, AutodiffError> {
        let idx = graph.index(loss)?;
        let value = &graph.nodes[idx].value;
        if value.numel() != 1 {
            return Err(AutodiffError::NotScalar(value.shape().to_vec()));
        }
        let mut pending = vec![Vec::new(); graph.len()];
        if graph.nodes[idx].requires_grad {
            pending[idx].push((SEED_KEY, Tensor::ones(value.shape())));
        }
        Ok(Self {
            graph: graph.id,
            cursor: idx + 1,
            pending,
            grads: vec![None; graph.len()],
        })
    }

    fn check(&self, graph: &Graph, v: Var) -> Result<usize, AutodiffError> {
        if graph.id != self.graph {
            return Err(AutodiffError::DetachedNode);
        }
        graph.index(v)
    }

    /// Finalizes every node with id ≥ `stop`, including `stop` itself.
    pub fn run_until(&mut self, graph: &Graph, stop: Var) -> Result<(), AutodiffError> {
        let stop = self.check(graph, stop)?;
        while self.cursor > stop {
            self.cursor -= 1;
            self.process(graph, self.cursor);
        }
        Ok(())
    }

    /// Gradient of an already finalized node.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if v.graph != self.graph || v.id < self.cursor {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Adds upstream gradient to a node that has not been finalized yet.
    /// `key` orders the contribution among the node's consumers.
    pub fn inject(&mut self, graph: &Graph, v: Var, grad: Tensor, key: usize) -> Result<(), AutodiffError> {
        let idx = self.check(graph, v)?;
        if idx >= self.cursor {
            return Err(AutodiffError::AlreadyFinalized(idx));
        }
        let expect = graph.nodes[idx].value.shape();
        if grad.shape() != expect {
            return Err(AutodiffError::ShapeMismatch {
                op: "inject",
                lhs: expect.to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        if graph.nodes[idx].requires_grad {
            self.pending[idx].push((key, graph.precision.round_tensor(grad)));
        }
        Ok(())
    }

    /// Runs the sweep to the first node and returns all gradients.
    pub fn finish(mut self, graph: &Graph) -> Result<Gradients, AutodiffError> {
        if graph.id != self.graph {
            return Err(AutodiffError::DetachedNode);
        }
        while self.cursor > 0 {
            self.cursor -= 1;
            self.process(graph, self.cursor);
        }
        Ok(Gradients {
            graph: self.graph,
            grads: self.grads,
        })
    }

    fn process(&mut self, graph: &Graph, idx: usize) {
        let mut contribs = std::mem::take(&mut self.pending[idx]);
        if contribs.is_empty() {
            return;
        }
        contribs.sort_by_key(|(key, _)| *key);
        let p = graph.precision;
        let mut iter = contribs.into_iter().map(|(_, g)| g);
        let mut total = iter.next().expect("nonempty");
        for g in iter {
            for (t, v) in total.data_mut().iter_mut().zip(g.data()) {
                *t = p.round(*t + v);
            }
        }
        let node = &graph.nodes[idx];
        if !matches!(node.op, Op::Leaf) {
            for (slot, g) in graph.local_grads(idx, &total).into_iter().enumerate() {
                let parent = node.parents[slot];
                if graph.nodes[parent].requires_grad {
                    self.pending[parent].push((idx, g));
                }
            }
        }
        self.grads[idx] = Some(total);
    }
}
