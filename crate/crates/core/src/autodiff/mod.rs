//! Reverse-mode automatic differentiation on a growable tape.
//!
//! Values are computed eagerly as nodes are pushed (define-by-run).
//! `backward` emits the gradient computation as new tape nodes rather
//! than bare tensors, so gradients are themselves differentiable and a
//! second `backward` yields Hessian-vector products. That is what
//! `hutchinson_diag` relies on for curvature estimates.
//!
//! Piecewise-linear ops (`relu`, `clamp`) carry their local slope as a
//! constant mask, which fixes their second derivative to zero.

pub mod optim;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    AddScalar(NodeId),
    Mul(NodeId, NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Scale(NodeId, f64),
    ScaleBy(NodeId, NodeId),
    Relu(NodeId),
    Clamp(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    SoftmaxLast(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Square(NodeId),
    Log(NodeId),
    Exp(NodeId),
    Recip(NodeId),
    SumRows(NodeId),
    BroadcastRows(NodeId),
    SumLastKeep(NodeId),
    BroadcastLast(NodeId),
    Fill(NodeId),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    PadRows(NodeId, usize, usize),
    PadCols(NodeId, usize, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    // Local slope mask for piecewise-linear ops, captured at forward time.
    mask: Option<Tensor>,
}

pub struct Tape {
    nodes: Vec<Node>,
}

/// Map from node id to the id of its gradient node, if the root depends on it.
pub struct Gradients {
    grad: Vec<Option<NodeId>>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> Option<NodeId> {
        self.grad.get(id.0).copied().flatten()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, mask: None });
        NodeId(self.nodes.len() - 1)
    }

    fn push_masked(&mut self, value: Tensor, op: Op, mask: Tensor) -> NodeId {
        self.nodes.push(Node { value, op, mask: Some(mask) });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input (parameter or generated variable).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant)
    }

    fn require_rank2(&self, id: NodeId, what: &str) -> Result<(usize, usize)> {
        let v = self.value(id);
        if v.shape().len() != 2 {
            return Err(Error::shape(format!("{what}: rank-2"), format!("{:?}", v.shape())));
        }
        Ok((v.shape()[0], v.shape()[1]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    /// Row-broadcast add: `a` is (r,c), `bias` is a rank-1 vector of length c.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (_, c) = self.require_rank2(a, "add_bias lhs")?;
        let bv = self.value(bias);
        if bv.shape() != [c] {
            return Err(Error::shape(format!("bias [{c}]"), format!("{:?}", bv.shape())));
        }
        let av = self.value(a);
        let mut out = av.clone();
        let cols = c;
        for i in 0..av.rows() {
            for j in 0..cols {
                let v = out.get2(i, j) + bv.data()[j];
                out.set2(i, j, v);
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let v = self.value(a).map(|x| x + c);
        Ok(self.push(v, Op::AddScalar(a)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.require_rank2(a, "matmul lhs")?;
        self.require_rank2(b, "matmul rhs")?;
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.require_rank2(a, "transpose")?;
        let v = self.value(a).transpose();
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// Multiply a tensor by a one-element node, keeping both differentiable.
    pub fn scale_by(&mut self, a: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape("one-element scalar node", format!("{:?}", sv.shape())));
        }
        let c = sv.data()[0];
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::ScaleBy(a, s)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mask = av.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
        let v = av.map(|x| x.max(0.0));
        self.push_masked(v, Op::Relu(a), mask)
    }

    /// Clamp to [lo, hi] with unit slope strictly inside the interval.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let av = self.value(a);
        let mask = av.map(|x| if x > lo && x < hi { 1.0 } else { 0.0 });
        let v = av.map(|x| x.clamp(lo, hi));
        self.push_masked(v, Op::Clamp(a), mask)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_rank2(a, "softmax")?;
        let av = self.value(a);
        let mut out = Tensor::zeros(&[r, c]);
        for i in 0..r {
            let row = av.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..c {
                out.set2(i, j, exps[j] / denom);
            }
        }
        Ok(self.push(out, Op::SoftmaxLast(a)))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| 1.0 / x);
        self.push(v, Op::Recip(a))
    }

    /// Sum over axis 0: (r,c) -> rank-1 [c].
    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, c) = self.require_rank2(a, "sum_rows")?;
        let av = self.value(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += av.get2(i, j);
            }
        }
        Ok(self.push(Tensor::vector(out), Op::SumRows(a)))
    }

    /// Tile a rank-1 vector [c] into (rows,c).
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId> {
        let vv = self.value(v);
        if vv.shape().len() != 1 {
            return Err(Error::shape("rank-1 vector", format!("{:?}", vv.shape())));
        }
        let c = vv.numel();
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(vv.data());
        }
        let t = Tensor::new(vec![rows, c], data)?;
        Ok(self.push(t, Op::BroadcastRows(v)))
    }

    /// Sum over the last axis keeping it: (r,c) -> (r,1).
    pub fn sum_last_keep(&mut self, a: NodeId) -> Result<NodeId> {
        let (r, _) = self.require_rank2(a, "sum_last_keep")?;
        let av = self.value(a);
        let mut out = Tensor::zeros(&[r, 1]);
        for i in 0..r {
            out.set2(i, 0, av.row(i).iter().sum());
        }
        Ok(self.push(out, Op::SumLastKeep(a)))
    }

    /// Tile (r,1) into (r,cols).
    pub fn broadcast_last(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let (r, c) = self.require_rank2(a, "broadcast_last")?;
        if c != 1 {
            return Err(Error::shape("(r,1)", format!("{:?}", self.value(a).shape())));
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(&[r, cols]);
        for i in 0..r {
            for j in 0..cols {
                out.set2(i, j, av.get2(i, 0));
            }
        }
        Ok(self.push(out, Op::BroadcastLast(a)))
    }

    /// Broadcast a one-element node to an arbitrary shape.
    pub fn fill(&mut self, s: NodeId, shape: &[usize]) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.numel() != 1 {
            return Err(Error::shape("one-element scalar node", format!("{:?}", sv.shape())));
        }
        let v = Tensor::full(shape, sv.data()[0]);
        Ok(self.push(v, Op::Fill(s)))
    }

    /// Matches a one-element gradient to the exact shape of the node it flows
    /// into, e.g. a `[1]` sum fed back to a `(1, 1)` slice.
    fn reshape_one(&mut self, g: NodeId, target: NodeId) -> Result<NodeId> {
        let want = self.value(target).shape().to_vec();
        if self.value(g).shape() == want.as_slice() {
            Ok(g)
        } else {
            self.fill(g, &want)
        }
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.require_rank2(p, "concat_rows part")?;
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_rows(&tensors)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        for &p in parts {
            self.require_rank2(p, "concat_cols part")?;
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.require_rank2(a, "slice_rows")?;
        let v = self.value(a).slice_rows(start, len)?;
        Ok(self.push(v, Op::SliceRows(a, start, len)))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.require_rank2(a, "slice_cols")?;
        let v = self.value(a).slice_cols(start, len)?;
        Ok(self.push(v, Op::SliceCols(a, start, len)))
    }

    /// Place `a` at row offset `start` inside a zero (total,c) tensor.
    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let (r, c) = self.require_rank2(a, "pad_rows")?;
        if start + r > total {
            return Err(Error::contract(format!("pad_rows {start}+{r} > {total}")));
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(&[total, c]);
        for i in 0..r {
            for j in 0..c {
                out.set2(start + i, j, av.get2(i, j));
            }
        }
        Ok(self.push(out, Op::PadRows(a, start, total)))
    }

    pub fn pad_cols(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let (r, c) = self.require_rank2(a, "pad_cols")?;
        if start + c > total {
            return Err(Error::contract(format!("pad_cols {start}+{c} > {total}")));
        }
        let av = self.value(a);
        let mut out = Tensor::zeros(&[r, total]);
        for i in 0..r {
            for j in 0..c {
                out.set2(i, start + j, av.get2(i, j));
            }
        }
        Ok(self.push(out, Op::PadCols(a, start, total)))
    }

    /// Mean squared error between two same-shaped nodes, as a scalar node.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let d = self.sub(a, b)?;
        let sq = self.square(d);
        Ok(self.mean(sq))
    }

    /// Reverse sweep from a scalar `root`. Gradient nodes are appended to
    /// the tape, so the result is itself differentiable.
    pub fn backward(&mut self, root: NodeId) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let horizon = root.0 + 1;
        let mut grad: Vec<Option<NodeId>> = vec![None; horizon];
        grad[root.0] = Some(self.constant(Tensor::scalar(1.0)));

        for id in (0..horizon).rev() {
            let Some(u) = grad[id] else { continue };
            let op = self.nodes[id].op.clone();
            let this = NodeId(id);
            match op {
                Op::Leaf | Op::Constant => {}
                Op::Add(a, b) => {
                    self.accum(&mut grad, a, u)?;
                    self.accum(&mut grad, b, u)?;
                }
                Op::AddBias(a, bias) => {
                    self.accum(&mut grad, a, u)?;
                    let gb = self.sum_rows(u)?;
                    self.accum(&mut grad, bias, gb)?;
                }
                Op::AddScalar(a) => self.accum(&mut grad, a, u)?,
                Op::Mul(a, b) => {
                    let ga = self.mul(u, b)?;
                    self.accum(&mut grad, a, ga)?;
                    let gb = self.mul(u, a)?;
                    self.accum(&mut grad, b, gb)?;
                }
                Op::Matmul(a, b) => {
                    let bt = self.transpose(b)?;
                    let ga = self.matmul(u, bt)?;
                    self.accum(&mut grad, a, ga)?;
                    let at = self.transpose(a)?;
                    let gb = self.matmul(at, u)?;
                    self.accum(&mut grad, b, gb)?;
                }
                Op::Transpose(a) => {
                    let g = self.transpose(u)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Scale(a, c) => {
                    let g = self.scale(u, c);
                    self.accum(&mut grad, a, g)?;
                }
                Op::ScaleBy(a, s) => {
                    let ga = self.scale_by(u, s)?;
                    self.accum(&mut grad, a, ga)?;
                    let prod = self.mul(u, a)?;
                    let gs = self.sum(prod);
                    // The scalar node may be (1,1) rather than [1].
                    let gs = self.reshape_one(gs, s)?;
                    self.accum(&mut grad, s, gs)?;
                }
                Op::Relu(a) | Op::Clamp(a) => {
                    let mask = self.nodes[id].mask.clone().expect("masked op");
                    let mc = self.constant(mask);
                    let g = self.mul(u, mc)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Tanh(a) => {
                    let sq = self.square(this);
                    let neg = self.scale(sq, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let g = self.mul(u, one_minus)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Sigmoid(a) => {
                    let neg = self.scale(this, -1.0);
                    let one_minus = self.add_scalar(neg, 1.0)?;
                    let d = self.mul(this, one_minus)?;
                    let g = self.mul(u, d)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::SoftmaxLast(a) => {
                    let cols = self.value(this).shape()[1];
                    let uy = self.mul(u, this)?;
                    let inner = self.sum_last_keep(uy)?;
                    let spread = self.broadcast_last(inner, cols)?;
                    let diff = self.sub(u, spread)?;
                    let g = self.mul(this, diff)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::MeanAll(a) => {
                    let n = self.value(a).numel() as f64;
                    let scaled = self.scale(u, 1.0 / n);
                    let shape = self.value(a).shape().to_vec();
                    let g = self.fill(scaled, &shape)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::SumAll(a) => {
                    let shape = self.value(a).shape().to_vec();
                    let g = self.fill(u, &shape)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Square(a) => {
                    let two_a = self.scale(a, 2.0);
                    let g = self.mul(u, two_a)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Log(a) => {
                    let inv = self.recip(a);
                    let g = self.mul(u, inv)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Exp(a) => {
                    let g = self.mul(u, this)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Recip(a) => {
                    let ysq = self.square(this);
                    let m = self.mul(u, ysq)?;
                    let g = self.scale(m, -1.0);
                    self.accum(&mut grad, a, g)?;
                }
                Op::SumRows(a) => {
                    let rows = self.value(a).shape()[0];
                    let g = self.broadcast_rows(u, rows)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::BroadcastRows(v) => {
                    let g = self.sum_rows(u)?;
                    self.accum(&mut grad, v, g)?;
                }
                Op::SumLastKeep(a) => {
                    let cols = self.value(a).shape()[1];
                    let g = self.broadcast_last(u, cols)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::BroadcastLast(a) => {
                    let g = self.sum_last_keep(u)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::Fill(s) => {
                    let g = self.sum(u);
                    let g = self.reshape_one(g, s)?;
                    self.accum(&mut grad, s, g)?;
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).shape()[0];
                        let g = self.slice_rows(u, offset, len)?;
                        self.accum(&mut grad, p, g)?;
                        offset += len;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).shape()[1];
                        let g = self.slice_cols(u, offset, len)?;
                        self.accum(&mut grad, p, g)?;
                        offset += len;
                    }
                }
                Op::SliceRows(a, start, _len) => {
                    let total = self.value(a).shape()[0];
                    let g = self.pad_rows(u, start, total)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::SliceCols(a, start, _len) => {
                    let total = self.value(a).shape()[1];
                    let g = self.pad_cols(u, start, total)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::PadRows(a, start, _total) => {
                    let len = self.value(a).shape()[0];
                    let g = self.slice_rows(u, start, len)?;
                    self.accum(&mut grad, a, g)?;
                }
                Op::PadCols(a, start, _total) => {
                    let len = self.value(a).shape()[1];
                    let g = self.slice_cols(u, start, len)?;
                    self.accum(&mut grad, a, g)?;
                }
            }
        }
        Ok(Gradients { grad })
    }

    fn accum(&mut self, grad: &mut [Option<NodeId>], parent: NodeId, g: NodeId) -> Result<()> {
        if matches!(self.nodes[parent.0].op, Op::Constant) {
            return Ok(());
        }
        grad[parent.0] = Some(match grad[parent.0] {
            None => g,
            Some(existing) => self.add(existing, g)?,
        });
        Ok(())
    }
}

/// Rademacher estimate of the Hessian diagonal of `root` w.r.t. `wrt`:
/// the mean over samples of z * H z with z uniform in {-1, +1}.
pub fn hutchinson_diag<R: Rng>(
    tape: &mut Tape,
    root: NodeId,
    wrt: NodeId,
    samples: usize,
    rng: &mut R,
) -> Result<Tensor> {
    grad_and_hessian_diag(tape, root, wrt, samples, rng).map(|(_, h)| h)
}

/// Gradient plus Hessian-diagonal estimate from one shared backward
/// sweep; the second-order pass reuses the first-order graph.
pub fn grad_and_hessian_diag<R: Rng>(
    tape: &mut Tape,
    root: NodeId,
    wrt: NodeId,
    samples: usize,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    if samples == 0 {
        return Err(Error::contract("hutchinson estimate needs samples >= 1"));
    }
    let grads = tape.backward(root)?;
    let shape = tape.value(wrt).shape().to_vec();
    let g = match grads.wrt(wrt) {
        Some(g) => g,
        // Root does not depend on wrt: both are identically zero.
        None => return Ok((Tensor::zeros(&shape), Tensor::zeros(&shape))),
    };
    let grad_value = tape.value(g).clone();
    let mut acc = Tensor::zeros(&shape);
    for _ in 0..samples {
        let z = rademacher(&shape, rng);
        let zc = tape.constant(z.clone());
        let gz = tape.mul(g, zc)?;
        let s = tape.sum(gz);
        let grads2 = tape.backward(s)?;
        let hz = match grads2.wrt(wrt) {
            Some(id) => tape.value(id).clone(),
            None => Tensor::zeros(&shape),
        };
        let term = z.mul(&hz)?;
        acc = acc.add(&term)?;
    }
    Ok((grad_value, acc.scale(1.0 / samples as f64)))
}

fn rademacher<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grad_value(tape: &mut Tape, root: NodeId, wrt: NodeId) -> Tensor {
        let grads = tape.backward(root).unwrap();
        let id = grads.wrt(wrt).unwrap();
        tape.value(id).clone()
    }

    #[test]
    fn square_grad_at_three() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.square(x);
        let s = tape.sum(y);
        let g = grad_value(&mut tape, s, x);
        assert_abs_diff_eq!(g.item().unwrap(), 6.0, epsilon = 1e-12);
    }

    #[test]
    fn dead_relu_grad_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-3.0));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = grad_value(&mut tape, s, x);
        assert_eq!(g.item().unwrap(), 0.0);

        // The kink itself also carries zero slope.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(0.0));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = grad_value(&mut tape, s, x);
        assert_eq!(g.item().unwrap(), 0.0);
    }

    #[test]
    fn constant_receives_no_grad() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        assert!(grads.wrt(c).is_none());
        assert!(grads.wrt(x).is_some());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(tape.backward(x).is_err());
    }

    /// Finite-difference check over a small two-layer network with every
    /// nonlinearity in the public op set on the path.
    #[test]
    fn finite_difference_matches_on_mixed_graph() {
        let w1 = Tensor::matrix(3, 4, (0..12).map(|i| 0.3 * (i as f64 - 5.0) / 6.0).collect())
            .unwrap();
        let b1 = Tensor::vector(vec![0.1, -0.2, 0.05, 0.3]);
        let w2 = Tensor::matrix(4, 2, (0..8).map(|i| 0.2 * (i as f64 - 3.0) / 4.0).collect())
            .unwrap();
        let x = Tensor::matrix(2, 3, vec![0.5, -0.3, 0.8, 0.2, 0.9, -0.7]).unwrap();

        let f = |w1: &Tensor, b1: &Tensor, w2: &Tensor| -> (Tape, NodeId, NodeId, NodeId, NodeId) {
            let mut tape = Tape::new();
            let xw = tape.constant(x.clone());
            let n_w1 = tape.leaf(w1.clone());
            let n_b1 = tape.leaf(b1.clone());
            let n_w2 = tape.leaf(w2.clone());
            let h = tape.matmul(xw, n_w1).unwrap();
            let h = tape.add_bias(h, n_b1).unwrap();
            let h = tape.tanh(h);
            let h = tape.matmul(h, n_w2).unwrap();
            let h = tape.sigmoid(h);
            let sm = tape.softmax(h).unwrap();
            let sq = tape.square(sm);
            let loss = tape.mean(sq);
            (tape, loss, n_w1, n_b1, n_w2)
        };

        let (mut tape, loss, n_w1, n_b1, n_w2) = f(&w1, &b1, &w2);
        let g_w1 = grad_value(&mut tape, loss, n_w1);
        let g_b1 = grad_value(&mut tape, loss, n_b1);
        let g_w2 = grad_value(&mut tape, loss, n_w2);

        let h = 1e-5;
        let eval = |w1: &Tensor, b1: &Tensor, w2: &Tensor| -> f64 {
            let (tape, loss, ..) = f(w1, b1, w2);
            tape.value(loss).item().unwrap()
        };
        for (param, grad, which) in
            [(&w1, &g_w1, 0usize), (&b1, &g_b1, 1), (&w2, &g_w2, 2)]
        {
            for i in 0..param.numel() {
                let mut plus = param.clone();
                plus.data_mut()[i] += h;
                let mut minus = param.clone();
                minus.data_mut()[i] -= h;
                let (fp, fm) = match which {
                    0 => (eval(&plus, &b1, &w2), eval(&minus, &b1, &w2)),
                    1 => (eval(&w1, &plus, &w2), eval(&w1, &minus, &w2)),
                    _ => (eval(&w1, &b1, &plus), eval(&w1, &b1, &minus)),
                };
                let fd = (fp - fm) / (2.0 * h);
                let ad = grad.data()[i];
                assert_abs_diff_eq!(ad, fd, epsilon = 1e-7);
            }
        }
    }

    /// For f = x1^2 + 3 x2^2 the Hessian is diagonal, so a single
    /// Rademacher sample is already exact.
    #[test]
    fn hutchinson_exact_on_diagonal_hessian() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.7, -1.3]));
        let sq = tape.square(x);
        let w = tape.constant(Tensor::vector(vec![1.0, 3.0]));
        let weighted = tape.mul(sq, w).unwrap();
        let f = tape.sum(weighted);
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let diag = hutchinson_diag(&mut tape, f, x, 3, &mut rng).unwrap();
        assert_abs_diff_eq!(diag.data()[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(diag.data()[1], 6.0, epsilon = 1e-12);
    }

    /// f = x1*x2 has zero diagonal; the estimator converges to it in mean.
    #[test]
    fn hutchinson_bilinear_mean_near_zero() {
        // f(x) = x1 * x2 via sum(x) trick: use product of two slices of a
        // (1,2) matrix node.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(1, 2, vec![0.4, 0.9]).unwrap());
        let x1 = tape.slice_cols(x, 0, 1).unwrap();
        let x2 = tape.slice_cols(x, 1, 1).unwrap();
        let prod = tape.mul(x1, x2).unwrap();
        let f = tape.sum(prod);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let diag = hutchinson_diag(&mut tape, f, x, 500, &mut rng).unwrap();
        // True diagonal is zero; sample mean of +/-1 products shrinks as
        // 1/sqrt(samples).
        assert!(diag.data()[0].abs() < 0.15, "got {}", diag.data()[0]);
        assert!(diag.data()[1].abs() < 0.15, "got {}", diag.data()[1]);
    }

    #[test]
    fn hutchinson_rejects_zero_samples() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(1.0));
        let f = tape.square(x);
        let f = tape.sum(f);
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        assert!(hutchinson_diag(&mut tape, f, x, 0, &mut rng).is_err());
    }

    #[test]
    fn hutchinson_deterministic_under_seed() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::vector(vec![0.3, -0.8, 1.1]));
            let sq = tape.square(x);
            let e = tape.exp(sq);
            let f = tape.sum(e);
            let mut rng = ChaCha12Rng::seed_from_u64(42);
            hutchinson_diag(&mut tape, f, x, 25, &mut rng).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    /// Second derivative through relu is zero: f = relu(x)^2 at x>0 has
    /// true f'' = 2, but the step factor is held constant, so the
    /// piecewise-linear convention keeps d(step)/dx = 0 while the square
    /// still contributes curvature.
    #[test]
    fn relu_second_derivative_convention() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let r = tape.relu(x);
        let sq = tape.square(r);
        let f = tape.sum(sq);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let diag = hutchinson_diag(&mut tape, f, x, 1, &mut rng).unwrap();
        // d/dx (2 * relu(x) * step(x)) with step constant = 2 * step^2 = 2.
        assert_abs_diff_eq!(diag.item().unwrap(), 2.0, epsilon = 1e-12);

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(-2.0));
        let r = tape.relu(x);
        let sq = tape.square(r);
        let f = tape.sum(sq);
        let diag = hutchinson_diag(&mut tape, f, x, 1, &mut rng).unwrap();
        assert_eq!(diag.item().unwrap(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap());
        let s = tape.softmax(x).unwrap();
        let v = tape.value(s);
        for i in 0..2 {
            let sum: f64 = v.row(i).iter().sum();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn clamp_blocks_gradient_outside_interval() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.5, 2.0, -1.0]));
        let c = tape.clamp(x, 0.0, 1.0);
        let s = tape.sum(c);
        let g = grad_value(&mut tape, s, x);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0]);
    }
}
