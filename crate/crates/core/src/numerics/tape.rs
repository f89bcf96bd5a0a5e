//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]. Nodes are
//! stored in creation order, so the list is already topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! Broadcasting is limited to rank-0 scalars in the binary elementwise ops.
//! Anything else that changes shape goes through an explicit op ([`Var::tile`],
//! [`Var::repeat_rows`], ...) so every backward rule stays a local, auditable
//! computation.

use std::cell::RefCell;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn};
use super::{fault, NumericsError, Tensor};

pub(crate) type NodeId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Both,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Side),
    Sub(NodeId, NodeId, Side),
    Mul(NodeId, NodeId, Side),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Abs(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId, usize),
    LogSoftmax(NodeId, usize),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    Reduce { x: NodeId, map: Vec<usize>, mean_div: f64 },
    L2Normalize { x: NodeId, norms: Vec<f64>, eps: f64 },
    Reshape(NodeId),
    Transpose(NodeId),
    Concat { inputs: Vec<NodeId>, axis: usize },
    Slice { x: NodeId, axis: usize, start: usize },
    Tile(NodeId, usize),
    RepeatRows(NodeId, usize),
    Gather(NodeId, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records a forward computation for one backward pass.
///
/// A tape is single-threaded; distinct tapes may live on distinct threads.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar loss with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`. A leaf that did not influence the loss gets zeros.
    pub fn get(&self, var: &Var<'_>) -> Tensor {
        self.get_id(var.id, &var.shape())
    }

    pub(crate) fn get_id(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.grads.get(id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn add_into(slot: &mut Option<Tensor>, shape: &[usize], delta: &[f64]) {
    match slot {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), delta.to_vec())),
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// (outer, axis extent, inner) decomposition around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Clears all nodes so the tape can record a new forward pass.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.consumed = false;
    }

    /// A trainable input.
    pub fn leaf(&self, value: Tensor) -> Result<Var<'_>, NumericsError> {
        self.push_checked(value, Op::Leaf, true, "leaf")
    }

    /// A non-trainable input; no gradient is ever computed for it.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>, NumericsError> {
        self.push_checked(value, Op::Leaf, false, "constant")
    }

    fn push_checked(
        &self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var<'_>, NumericsError> {
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(NumericsError::StaleTape);
        }
        inner.nodes.push(Node { value, op, requires_grad });
        Ok(Var { tape: self, id: inner.nodes.len() - 1 })
    }

    fn value(&self, id: NodeId) -> Tensor {
        self.inner.borrow().nodes[id].value.clone()
    }

    fn shape_of(&self, id: NodeId) -> Vec<usize> {
        self.inner.borrow().nodes[id].value.shape().to_vec()
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let inner = self.inner.borrow();
        ids.iter().any(|&i| inner.nodes[i].requires_grad)
    }

    fn check_same_tape(&self, other: &Var<'_>) -> Result<(), NumericsError> {
        if std::ptr::eq(self, other.tape) {
            Ok(())
        } else {
            Err(NumericsError::ForeignVar)
        }
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// A tape supports exactly one backward pass; call [`Tape::reset`] before
    /// recording the next forward pass.
    pub fn backward(&self, loss: &Var<'_>) -> Result<Gradients, NumericsError> {
        self.check_same_tape(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.consumed {
            return Err(NumericsError::StaleTape);
        }
        let loss_shape = inner.nodes[loss.id].value.shape().to_vec();
        if inner.nodes[loss.id].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: loss_shape });
        }
        inner.consumed = true;
        let nodes = &inner.nodes;
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::full(&loss_shape, 1.0));
        let corrupt = fault::active();

        for id in (0..=loss.id).rev() {
            if !nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let gd = g.data();
            let out = node.value.data();
            macro_rules! val {
                ($i:expr) => {
                    nodes[$i].value
                };
            }
            macro_rules! push {
                ($i:expr, $delta:expr) => {{
                    let i = $i;
                    if nodes[i].requires_grad {
                        let shape = nodes[i].value.shape().to_vec();
                        add_into(&mut grads[i], &shape, &$delta);
                    }
                }};
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (p, q) = (val!(*a).shape()[0], val!(*a).shape()[1]);
                    let r = val!(*b).shape()[1];
                    let mut da = matmul_nt(gd, val!(*b).data(), p, r, q);
                    if corrupt == Some(fault::Fault::MatMulBackward) {
                        da.iter_mut().for_each(|v| *v *= 1.01);
                    }
                    push!(*a, da);
                    push!(*b, matmul_tn(val!(*a).data(), gd, p, q, r));
                }
                Op::Add(a, b, side) | Op::Sub(a, b, side) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let total: f64 = gd.iter().sum();
                    match side {
                        Side::Both => {
                            push!(*a, gd.to_vec());
                            push!(*b, gd.iter().map(|v| sign * v).collect::<Vec<_>>());
                        }
                        Side::LeftScalar => {
                            push!(*a, vec![total]);
                            push!(*b, gd.iter().map(|v| sign * v).collect::<Vec<_>>());
                        }
                        Side::RightScalar => {
                            push!(*a, gd.to_vec());
                            push!(*b, vec![sign * total]);
                        }
                    }
                }
                Op::Mul(a, b, side) => {
                    let (av, bv) = (val!(*a).data(), val!(*b).data());
                    match side {
                        Side::Both => {
                            push!(*a, gd.iter().zip(bv).map(|(g, y)| g * y).collect::<Vec<_>>());
                            push!(*b, gd.iter().zip(av).map(|(g, x)| g * x).collect::<Vec<_>>());
                        }
                        Side::LeftScalar => {
                            let s = av[0];
                            let da: f64 = gd.iter().zip(bv).map(|(g, y)| g * y).sum();
                            push!(*a, vec![da]);
                            push!(*b, gd.iter().map(|g| g * s).collect::<Vec<_>>());
                        }
                        Side::RightScalar => {
                            let s = bv[0];
                            let db: f64 = gd.iter().zip(av).map(|(g, x)| g * x).sum();
                            push!(*a, gd.iter().map(|g| g * s).collect::<Vec<_>>());
                            push!(*b, vec![db]);
                        }
                    }
                }
                Op::Scale(a, c) => push!(*a, gd.iter().map(|g| g * c).collect::<Vec<_>>()),
                Op::AddScalar(a) => push!(*a, gd.to_vec()),
                Op::Abs(a) => {
                    let av = val!(*a).data();
                    let d: Vec<f64> = gd
                        .iter()
                        .zip(av)
                        .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                        .collect();
                    push!(*a, d);
                }
                Op::Relu(a) => {
                    let av = val!(*a).data();
                    push!(*a, gd.iter().zip(av).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect::<Vec<_>>());
                }
                Op::Sigmoid(a) => {
                    let mut d: Vec<f64> = gd.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                    if corrupt == Some(fault::Fault::SigmoidBackward) {
                        d.iter_mut().for_each(|v| *v *= 1.01);
                    }
                    push!(*a, d);
                }
                Op::Softmax(a, axis) => {
                    let (outer, n, inner_sz) = split_axis(node.value.shape(), *axis);
                    let mut d = vec![0.0; gd.len()];
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let idx = |k: usize| (o * n + k) * inner_sz + i;
                            let dot: f64 = (0..n).map(|k| gd[idx(k)] * out[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] = out[idx(k)] * (gd[idx(k)] - dot);
                            }
                        }
                    }
                    push!(*a, d);
                }
                Op::LogSoftmax(a, axis) => {
                    let (outer, n, inner_sz) = split_axis(node.value.shape(), *axis);
                    let mut d = vec![0.0; gd.len()];
                    for o in 0..outer {
                        for i in 0..inner_sz {
                            let idx = |k: usize| (o * n + k) * inner_sz + i;
                            let total: f64 = (0..n).map(|k| gd[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] = gd[idx(k)] - out[idx(k)].exp() * total;
                            }
                        }
                    }
                    push!(*a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let w = val!(*gamma).len();
                    let gam = val!(*gamma).data();
                    let rows = xhat.len() / w;
                    let mut dx = vec![0.0; xhat.len()];
                    let mut dg = vec![0.0; w];
                    let mut db = vec![0.0; w];
                    for r in 0..rows {
                        let gs = &gd[r * w..(r + 1) * w];
                        let xh = &xhat[r * w..(r + 1) * w];
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for k in 0..w {
                            dg[k] += gs[k] * xh[k];
                            db[k] += gs[k];
                            let dxh = gs[k] * gam[k];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xh[k];
                        }
                        let wf = w as f64;
                        for k in 0..w {
                            let dxh = gs[k] * gam[k];
                            dx[r * w + k] = inv_std[r] / wf * (wf * dxh - sum_dxh - xh[k] * sum_dxh_xh);
                        }
                    }
                    push!(*x, dx);
                    push!(*gamma, dg);
                    push!(*beta, db);
                }
                Op::Reduce { x, map, mean_div } => {
                    let d: Vec<f64> = map.iter().map(|&o| gd[o] / mean_div).collect();
                    push!(*x, d);
                }
                Op::L2Normalize { x, norms, eps } => {
                    let w = node.value.last_dim();
                    let mut d = vec![0.0; gd.len()];
                    for (r, &n) in norms.iter().enumerate() {
                        let gs = &gd[r * w..(r + 1) * w];
                        let ys = &out[r * w..(r + 1) * w];
                        if n > *eps {
                            let dot: f64 = gs.iter().zip(ys).map(|(g, y)| g * y).sum();
                            for k in 0..w {
                                d[r * w + k] = (gs[k] - ys[k] * dot) / n;
                            }
                        } else {
                            for k in 0..w {
                                d[r * w + k] = gs[k] / eps;
                            }
                        }
                    }
                    push!(*x, d);
                }
                Op::Reshape(a) => push!(*a, gd.to_vec()),
                Op::Transpose(a) => {
                    let (p, q) = (node.value.shape()[0], node.value.shape()[1]);
                    let mut d = vec![0.0; gd.len()];
                    for i in 0..p {
                        for j in 0..q {
                            d[j * p + i] = gd[i * q + j];
                        }
                    }
                    push!(*a, d);
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner_sz) = split_axis(node.value.shape(), *axis);
                    let mut offset = 0;
                    for &inp in inputs {
                        let ext = nodes[inp].value.shape()[*axis];
                        let mut d = Vec::with_capacity(outer * ext * inner_sz);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner_sz;
                            d.extend_from_slice(&gd[start..start + ext * inner_sz]);
                        }
                        push!(inp, d);
                        offset += ext;
                    }
                }
                Op::Slice { x, axis, start } => {
                    let in_shape = nodes[*x].value.shape();
                    let (outer, total, inner_sz) = split_axis(in_shape, *axis);
                    let ext = node.value.shape()[*axis];
                    let mut d = vec![0.0; nodes[*x].value.len()];
                    for o in 0..outer {
                        let dst = (o * total + start) * inner_sz;
                        let src = o * ext * inner_sz;
                        d[dst..dst + ext * inner_sz].copy_from_slice(&gd[src..src + ext * inner_sz]);
                    }
                    push!(*x, d);
                }
                Op::Tile(a, times) => {
                    let block = nodes[*a].value.len();
                    let mut d = vec![0.0; block];
                    for t in 0..*times {
                        for (k, v) in d.iter_mut().enumerate() {
                            *v += gd[t * block + k];
                        }
                    }
                    push!(*a, d);
                }
                Op::RepeatRows(a, k) => {
                    let w = node.value.last_dim();
                    let rows = nodes[*a].value.rows();
                    let mut d = vec![0.0; rows * w];
                    for r in 0..rows {
                        for rep in 0..*k {
                            let src = (r * k + rep) * w;
                            for c in 0..w {
                                d[r * w + c] += gd[src + c];
                            }
                        }
                    }
                    push!(*a, d);
                }
                Op::Gather(a, idx) => {
                    let mut d = vec![0.0; nodes[*a].value.len()];
                    for (&i, g) in idx.iter().zip(gd) {
                        d[i] += g;
                    }
                    push!(*a, d);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    /// Value of a one-element var.
    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().nodes[self.id].value.data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires(&[self.id])
    }

    fn emit(&self, value: Tensor, op: Op, inputs: &[NodeId], name: &'static str) -> Result<Var<'t>, NumericsError> {
        let rg = self.tape.requires(inputs);
        self.tape.push_checked(value, op, rg, name)
    }

    fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.tape.check_same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", a.shape(), b.shape()));
        }
        let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let out = Tensor::from_parts(vec![p, r], matmul_raw(a.data(), b.data(), p, q, r));
        self.emit(out, Op::MatMul(self.id, rhs.id), &[self.id, rhs.id], "matmul")
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId, Side) -> Op,
    ) -> Result<Var<'t>, NumericsError> {
        self.tape.check_same_tape(rhs)?;
        let (a, b) = (self.value(), rhs.value());
        let (side, shape) = if a.shape() == b.shape() {
            (Side::Both, a.shape().to_vec())
        } else if a.rank() == 0 {
            (Side::LeftScalar, b.shape().to_vec())
        } else if b.rank() == 0 {
            (Side::RightScalar, a.shape().to_vec())
        } else {
            return Err(shape_err(name, a.shape(), b.shape()));
        };
        let data = match side {
            Side::Both => a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
            Side::LeftScalar => b.data().iter().map(|y| f(a.data()[0], *y)).collect(),
            Side::RightScalar => a.data().iter().map(|x| f(*x, b.data()[0])).collect(),
        };
        let out = Tensor::from_parts(shape, data);
        self.emit(out, make(self.id, rhs.id, side), &[self.id, rhs.id], name)
    }

    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>, NumericsError> {
        let out = self.with_value(|v| v.map(f));
        self.emit(out, op, &[self.id], name)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>, NumericsError> {
        self.unary("scale", |x| x * c, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var<'t>, NumericsError> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>, NumericsError> {
        self.unary("add_scalar", |x| x + c, Op::AddScalar(self.id))
    }

    pub fn abs(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("abs", f64::abs, Op::Abs(self.id))
    }

    /// ReLU; the subgradient at exactly zero is zero.
    pub fn relu(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>, NumericsError> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    fn check_axis(&self, name: &'static str, axis: usize) -> Result<Vec<usize>, NumericsError> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(NumericsError::Axis { op: name, axis, shape });
        }
        Ok(shape)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, NumericsError> {
        let shape = self.check_axis("softmax", axis)?;
        let out = self.with_value(|v| along_axis(v.data(), &shape, axis, softmax_slice));
        self.emit(Tensor::from_parts(shape, out), Op::Softmax(self.id, axis), &[self.id], "softmax")
    }

    /// Log-softmax along `axis` via log-sum-exp.
    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>, NumericsError> {
        let shape = self.check_axis("log_softmax", axis)?;
        let out = self.with_value(|v| along_axis(v.data(), &shape, axis, log_softmax_slice));
        self.emit(Tensor::from_parts(shape, out), Op::LogSoftmax(self.id, axis), &[self.id], "log_softmax")
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>, NumericsError> {
        self.tape.check_same_tape(gamma)?;
        self.tape.check_same_tape(beta)?;
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let x = self.value();
        let (g, b) = (gamma.value(), beta.value());
        let w = x.last_dim();
        if x.rank() == 0 || g.shape() != [w] || b.shape() != [w] {
            return Err(shape_err("layer_norm", x.shape(), g.shape()));
        }
        let rows = x.len() / w;
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x.data()[r * w..(r + 1) * w];
            let mean = xs.iter().sum::<f64>() / w as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for k in 0..w {
                let xh = (xs[k] - mean) * is;
                xhat[r * w + k] = xh;
                out[r * w + k] = g.data()[k] * xh + b.data()[k];
            }
        }
        let op = Op::LayerNorm { x: self.id, gamma: gamma.id, beta: beta.id, xhat, inv_std };
        self.emit(Tensor::from_parts(x.shape().to_vec(), out), op, &[self.id, gamma.id, beta.id], "layer_norm")
    }

    fn reduce(&self, axes: &[usize], mean: bool) -> Result<Var<'t>, NumericsError> {
        let name = if mean { "mean" } else { "sum" };
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(NumericsError::Axis { op: name, axis: a, shape });
            }
            seen[a] = true;
        }
        let out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !seen[*i]).map(|(_, &e)| e).collect();
        let out_strides = strides(&out_shape);
        let in_strides = strides(&shape);
        let n: usize = shape.iter().product();
        let mut map = Vec::with_capacity(n);
        for flat in 0..n {
            let mut o = 0;
            let mut k = 0;
            for (ax, &st) in in_strides.iter().enumerate() {
                let coord = (flat / st) % shape[ax];
                if !seen[ax] {
                    o += coord * out_strides[k];
                    k += 1;
                }
            }
            map.push(o);
        }
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mean_div = if mean { count as f64 } else { 1.0 };
        let mut out = vec![0.0; out_shape.iter().product()];
        self.with_value(|v| {
            for (x, &o) in v.data().iter().zip(&map) {
                out[o] += x;
            }
        });
        if mean {
            out.iter_mut().for_each(|v| *v /= mean_div);
        }
        self.emit(Tensor::from_parts(out_shape, out), Op::Reduce { x: self.id, map, mean_div }, &[self.id], name)
    }

    /// Sum over `axes`; an empty selection is the identity.
    pub fn sum(&self, axes: &[usize]) -> Result<Var<'t>, NumericsError> {
        self.reduce(axes, false)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<Var<'t>, NumericsError> {
        self.reduce(axes, true)
    }

    pub fn sum_all(&self) -> Result<Var<'t>, NumericsError> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Var<'t>, NumericsError> {
        let axes: Vec<usize> = (0..self.shape().len()).collect();
        self.reduce(&axes, true)
    }

    /// Divides each last-axis row by `max(‖row‖, eps)`; zero rows stay zero.
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<'t>, NumericsError> {
        if eps <= 0.0 {
            return Err(NumericsError::InvalidArgument(format!("l2_normalize eps must be > 0, got {eps}")));
        }
        let x = self.value();
        let w = x.last_dim();
        let rows = x.len() / w;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let xs = &x.data()[r * w..(r + 1) * w];
            let n = xs.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = n.max(eps);
            for k in 0..w {
                out[r * w + k] = xs[k] / denom;
            }
            norms.push(n);
        }
        let op = Op::L2Normalize { x: self.id, norms, eps };
        self.emit(Tensor::from_parts(x.shape().to_vec(), out), op, &[self.id], "l2_normalize")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, NumericsError> {
        let out = self.with_value(|v| v.reshaped(shape))?;
        self.emit(out, Op::Reshape(self.id), &[self.id], "reshape")
    }

    /// Transpose of a matrix.
    pub fn transpose(&self) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if x.rank() != 2 {
            return Err(NumericsError::Axis { op: "transpose", axis: 1, shape: x.shape().to_vec() });
        }
        let (p, q) = (x.shape()[0], x.shape()[1]);
        let mut out = vec![0.0; p * q];
        for i in 0..p {
            for j in 0..q {
                out[j * p + i] = x.data()[i * q + j];
            }
        }
        self.emit(Tensor::from_parts(vec![q, p], out), Op::Transpose(self.id), &[self.id], "transpose")
    }

    /// Concatenates `parts` along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>, NumericsError> {
        let first = parts.first().ok_or_else(|| NumericsError::InvalidArgument("concat of nothing".into()))?;
        let base = first.check_axis("concat", axis)?;
        let mut total = 0;
        for p in parts {
            first.tape.check_same_tape(p)?;
            let s = p.shape();
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, &s));
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner_sz) = split_axis(&out_shape, axis);
        let values: Vec<Tensor> = parts.iter().map(Var::value).collect();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner_sz;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat { inputs: ids.clone(), axis };
        first.emit(Tensor::from_parts(out_shape, out), op, &ids, "concat")
    }

    /// `len` consecutive entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>, NumericsError> {
        let shape = self.check_axis("slice", axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(NumericsError::InvalidArgument(format!(
                "slice [{start}, {}) out of range for axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, total, inner_sz) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner_sz);
        self.with_value(|v| {
            for o in 0..outer {
                let s = (o * total + start) * inner_sz;
                out.extend_from_slice(&v.data()[s..s + len * inner_sz]);
            }
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        let op = Op::Slice { x: self.id, axis, start };
        self.emit(Tensor::from_parts(out_shape, out), op, &[self.id], "slice")
    }

    /// Stacks `times` copies of a matrix vertically: `[r×c] → [times·r × c]`.
    pub fn tile(&self, times: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if x.rank() != 2 || times == 0 {
            return Err(NumericsError::Axis { op: "tile", axis: 0, shape: x.shape().to_vec() });
        }
        let data = x.data().repeat(times);
        let shape = vec![x.shape()[0] * times, x.shape()[1]];
        self.emit(Tensor::from_parts(shape, data), Op::Tile(self.id, times), &[self.id], "tile")
    }

    /// Repeats each row `k` times in place: `[r×c] → [r·k × c]`.
    pub fn repeat_rows(&self, k: usize) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if x.rank() != 2 || k == 0 {
            return Err(NumericsError::Axis { op: "repeat_rows", axis: 0, shape: x.shape().to_vec() });
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let mut data = Vec::with_capacity(r * k * c);
        for i in 0..r {
            for _ in 0..k {
                data.extend_from_slice(x.row(i));
            }
        }
        self.emit(Tensor::from_parts(vec![r * k, c], data), Op::RepeatRows(self.id, k), &[self.id], "repeat_rows")
    }

    /// Picks entries by flat row-major index into a 1-D result.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        if indices.is_empty() {
            return Err(NumericsError::InvalidArgument("gather needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(NumericsError::InvalidArgument(format!("gather index {bad} out of range for {:?}", x.shape())));
        }
        let data: Vec<f64> = indices.iter().map(|&i| x.data()[i]).collect();
        let op = Op::Gather(self.id, indices.to_vec());
        self.emit(Tensor::from_parts(vec![indices.len()], data), op, &[self.id], "gather")
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn along_axis(data: &[f64], shape: &[usize], axis: usize, f: fn(&mut [f64])) -> Vec<f64> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = data.to_vec();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for i in 0..inner {
            for k in 0..n {
                buf[k] = data[(o * n + k) * inner + i];
            }
            f(&mut buf);
            for k in 0..n {
                out[(o * n + k) * inner + i] = buf[k];
            }
        }
    }
    out
}

fn softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

fn log_softmax_slice(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    v.iter_mut().for_each(|x| *x -= lse);
}

/// Softmax of a plain slice, for callers outside the tape.
pub fn softmax_raw(v: &[f64]) -> Vec<f64> {
    let mut out = v.to_vec();
    softmax_slice(&mut out);
    out
}
