//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records nodes in evaluation order. Each node is either a
//! constant, a differentiable input, a parameter loaded from a
//! [`ParamStore`], or a [`Primitive`] applied to earlier nodes. Because
//! nodes can only reference nodes that already exist, the tape is acyclic
//! and topologically ordered by construction.
//!
//! Values are computed eagerly when a node is recorded, so the graph doubles
//! as the forward pass. [`Graph::backward`] walks the tape in reverse and
//! accumulates parameter gradients into the store.

use crate::error::{NumericsError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The primitive set. Shapes are checked when a primitive is applied.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise `a + b` on equal shapes.
    Add,
    /// Elementwise `a - b`.
    Sub,
    /// Elementwise `a * b`.
    Mul,
    /// Elementwise `a / b`; any zero in `b` is an error.
    Div,
    /// `x + bias` where `bias` has the extent of the last axis of `x`.
    AddRow,
    /// `scale * a + shift`.
    Affine { scale: f64, shift: f64 },
    /// `[p, q] x [q, r] -> [p, r]`.
    MatMul,
    /// `[p, q] x [r, q]^T -> [p, r]`.
    MatMulNt,
    /// `[p, q] x [q] -> [p]`.
    MatVec,
    /// `[b, p, q] x [b, q] -> [b, p]`, one product per leading index.
    BatchMatVec,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// `x + 1` for `x >= 0`, `exp(x)` otherwise.
    EluPlusOne,
    Sqrt,
    Log,
    /// Sum of all entries, producing a scalar.
    Sum,
    /// Row `i` of the output is row `i` of `a` when `mask[i]`, else of `b`.
    SelectRows { mask: Vec<bool> },
    /// Clamps `a` into `[-bound, bound]` elementwise.
    ClampAbs,
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "divide",
            Primitive::AddRow => "add_row",
            Primitive::Affine { .. } => "affine",
            Primitive::MatMul => "matmul",
            Primitive::MatMulNt => "matmul_nt",
            Primitive::MatVec => "matvec",
            Primitive::BatchMatVec => "batch_matvec",
            Primitive::Concat { .. } => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Relu => "relu",
            Primitive::Softmax => "softmax",
            Primitive::EluPlusOne => "elu_plus_one",
            Primitive::Sqrt => "sqrt",
            Primitive::Log => "log",
            Primitive::Sum => "sum",
            Primitive::SelectRows { .. } => "select_rows",
            Primitive::ClampAbs => "clamp_abs",
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Constant,
    Input,
    Param(ParamId),
    Apply(Primitive, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    source: Source,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Clone, Debug)]
pub struct NodeGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl NodeGrads {
    /// Gradient with respect to `var`, or `None` if it does not influence
    /// the loss or is a constant.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn invalid(op: &'static str, detail: impl Into<String>) -> NumericsError {
    NumericsError::InvalidShape {
        op,
        detail: detail.into(),
    }
}

/// `(outer, dim, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn elu_plus_one(x: f64) -> f64 {
    if x >= 0.0 {
        x + 1.0
    } else {
        x.exp()
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a value that gradients do not flow into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Source::Constant, value, false)
    }

    /// Records a differentiable leaf that is not a stored parameter.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(Source::Input, value, true)
    }

    /// Loads the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(Source::Param(id), store.value(id).clone(), true)
    }

    /// Copies the value of `var` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, var: Var) -> Var {
        let value = self.nodes[var.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, source: Source, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            source,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `kind` to `inputs`, records the node and returns its handle.
    pub fn apply(&mut self, kind: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Primitive::Concat { .. } => inputs.len().max(1),
            Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::AddRow
            | Primitive::MatMul
            | Primitive::MatMulNt
            | Primitive::MatVec
            | Primitive::BatchMatVec
            | Primitive::SelectRows { .. }
            | Primitive::ClampAbs => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(NumericsError::InvalidArgument(format!(
                "{} takes {arity} inputs, got {}",
                kind.name(),
                inputs.len()
            )));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(NumericsError::InvalidArgument(format!(
                "{}: node {} does not exist",
                kind.name(),
                bad.0
            )));
        }
        let value = self.evaluate(&kind, inputs)?;
        if !value.is_finite() {
            return Err(NumericsError::NonFinite { op: kind.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Source::Apply(kind, inputs.to_vec()), value, requires_grad))
    }

    fn evaluate(&self, kind: &Primitive, inputs: &[Var]) -> Result<Tensor> {
        let op = kind.name();
        let arg = |i: usize| &self.nodes[inputs[i].0].value;
        let out = match kind {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(op, a, b));
                }
                if matches!(kind, Primitive::Div) {
                    if let Some(index) = b.data().iter().position(|&v| v == 0.0) {
                        return Err(NumericsError::ZeroDivisor { index });
                    }
                }
                let f: fn(f64, f64) -> f64 = match kind {
                    Primitive::Add => |x, y| x + y,
                    Primitive::Sub => |x, y| x - y,
                    Primitive::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::AddRow => {
                let (x, b) = (arg(0), arg(1));
                let width = x.shape().last().copied().unwrap_or(1);
                if b.shape() != [width] {
                    return Err(mismatch(op, x, b));
                }
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(width.max(1)) {
                    for (v, &bias) in row.iter_mut().zip(b.data()) {
                        *v += bias;
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Primitive::Affine { scale, shift } => {
                let a = arg(0);
                let data = a.data().iter().map(|&x| scale * x + shift).collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::MatMul => {
                let (a, b) = (arg(0), arg(1));
                let (&[p, q], &[q2, r]) = (a.shape(), b.shape()) else {
                    return Err(invalid(op, "both operands must be matrices"));
                };
                if q != q2 {
                    return Err(mismatch(op, a, b));
                }
                let mut out = vec![0.0; p * r];
                let (ad, bd) = (a.data(), b.data());
                for i in 0..p {
                    let orow = &mut out[i * r..(i + 1) * r];
                    for k in 0..q {
                        let aik = ad[i * q + k];
                        if aik == 0.0 {
                            continue;
                        }
                        for (o, &bkj) in orow.iter_mut().zip(&bd[k * r..(k + 1) * r]) {
                            *o += aik * bkj;
                        }
                    }
                }
                Tensor::from_parts(vec![p, r], out)
            }
            Primitive::MatMulNt => {
                let (a, b) = (arg(0), arg(1));
                let (&[p, q], &[r, q2]) = (a.shape(), b.shape()) else {
                    return Err(invalid(op, "both operands must be matrices"));
                };
                if q != q2 {
                    return Err(mismatch(op, a, b));
                }
                let (ad, bd) = (a.data(), b.data());
                let mut out = Vec::with_capacity(p * r);
                for i in 0..p {
                    let arow = &ad[i * q..(i + 1) * q];
                    for j in 0..r {
                        out.push(dot(arow, &bd[j * q..(j + 1) * q]));
                    }
                }
                Tensor::from_parts(vec![p, r], out)
            }
            Primitive::MatVec => {
                let (a, x) = (arg(0), arg(1));
                let (&[p, q], &[q2]) = (a.shape(), x.shape()) else {
                    return Err(invalid(op, "expected a matrix and a vector"));
                };
                if q != q2 {
                    return Err(mismatch(op, a, x));
                }
                let out = (0..p)
                    .map(|i| dot(&a.data()[i * q..(i + 1) * q], x.data()))
                    .collect();
                Tensor::from_parts(vec![p], out)
            }
            Primitive::BatchMatVec => {
                let (a, x) = (arg(0), arg(1));
                let (&[nb, p, q], &[nb2, q2]) = (a.shape(), x.shape()) else {
                    return Err(invalid(op, "expected [b, p, q] and [b, q]"));
                };
                if nb != nb2 || q != q2 {
                    return Err(mismatch(op, a, x));
                }
                let mut out = Vec::with_capacity(nb * p);
                for b in 0..nb {
                    let xb = &x.data()[b * q..(b + 1) * q];
                    let ab = &a.data()[b * p * q..(b + 1) * p * q];
                    for i in 0..p {
                        out.push(dot(&ab[i * q..(i + 1) * q], xb));
                    }
                }
                Tensor::from_parts(vec![nb, p], out)
            }
            Primitive::Concat { axis } => {
                let first = arg(0);
                if *axis >= first.shape().len() {
                    return Err(invalid(op, format!("axis {axis} out of range")));
                }
                let mut total = 0;
                for i in 0..inputs.len() {
                    let t = arg(i);
                    let same_rank = t.shape().len() == first.shape().len();
                    let compatible = same_rank
                        && t.shape()
                            .iter()
                            .zip(first.shape())
                            .enumerate()
                            .all(|(d, (x, y))| d == *axis || x == y);
                    if !compatible {
                        return Err(mismatch(op, first, t));
                    }
                    total += t.shape()[*axis];
                }
                let (outer, _, inner) = axis_split(first.shape(), *axis);
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for i in 0..inputs.len() {
                        let t = arg(i);
                        let block = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                    }
                }
                let mut shape = first.shape().to_vec();
                shape[*axis] = total;
                Tensor::from_parts(shape, data)
            }
            Primitive::Slice { axis, start, len } => {
                let a = arg(0);
                if *axis >= a.shape().len() || start + len > a.shape()[*axis] {
                    return Err(invalid(
                        op,
                        format!("[{start}, {}) on axis {axis} of {:?}", start + len, a.shape()),
                    ));
                }
                let (outer, dim, inner) = axis_split(a.shape(), *axis);
                let mut data = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let from = (o * dim + start) * inner;
                    data.extend_from_slice(&a.data()[from..from + len * inner]);
                }
                let mut shape = a.shape().to_vec();
                shape[*axis] = *len;
                Tensor::from_parts(shape, data)
            }
            Primitive::Reshape { shape } => {
                let a = arg(0);
                if shape.iter().product::<usize>() != a.len() {
                    return Err(invalid(op, format!("{:?} -> {shape:?}", a.shape())));
                }
                Tensor::from_parts(shape.clone(), a.data().to_vec())
            }
            Primitive::Relu => map(arg(0), |x| x.max(0.0)),
            Primitive::EluPlusOne => map(arg(0), elu_plus_one),
            Primitive::Sqrt => {
                let a = arg(0);
                if a.data().iter().any(|&x| x < 0.0) {
                    return Err(invalid(op, "negative input"));
                }
                map(a, f64::sqrt)
            }
            Primitive::Log => {
                let a = arg(0);
                if a.data().iter().any(|&x| x <= 0.0) {
                    return Err(invalid(op, "non-positive input"));
                }
                map(a, f64::ln)
            }
            Primitive::Softmax => {
                let a = arg(0);
                let width = match a.shape().last() {
                    Some(&w) if w > 0 => w,
                    _ => return Err(invalid(op, "needs a non-empty last axis")),
                };
                let mut data = a.data().to_vec();
                for row in data.chunks_mut(width) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - max).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                }
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::Sum => Tensor::from_parts(Vec::new(), vec![arg(0).data().iter().sum()]),
            Primitive::SelectRows { mask } => {
                let (a, b) = (arg(0), arg(1));
                if a.shape() != b.shape() {
                    return Err(mismatch(op, a, b));
                }
                let rows = a.shape().first().copied().unwrap_or(0);
                if mask.len() != rows || rows == 0 {
                    return Err(invalid(op, format!("mask of {} for {rows} rows", mask.len())));
                }
                let width = a.len() / rows;
                let mut data = Vec::with_capacity(a.len());
                for (i, &keep) in mask.iter().enumerate() {
                    let src = if keep { a } else { b };
                    data.extend_from_slice(&src.data()[i * width..(i + 1) * width]);
                }
                Tensor::from_parts(a.shape().to_vec(), data)
            }
            Primitive::ClampAbs => {
                let (a, bound) = (arg(0), arg(1));
                if a.shape() != bound.shape() {
                    return Err(mismatch(op, a, bound));
                }
                let data = a
                    .data()
                    .iter()
                    .zip(bound.data())
                    .map(|(&x, &r)| x.clamp(-r.abs(), r.abs()))
                    .collect();
                Tensor::from_parts(a.shape().to_vec(), data)
            }
        };
        Ok(out)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<NodeGrads> {
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(NumericsError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if let Source::Apply(kind, inputs) = &self.nodes[idx].source {
                self.propagate(kind, inputs, &self.nodes[idx].value, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(NodeGrads { grads })
    }

    /// Backpropagates from `loss` and adds parameter gradients into `store`.
    ///
    /// Parameters the loss does not depend on receive nothing, so their
    /// accumulators stay at whatever they held (zero after a step).
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Source::Param(id), Some(g)) = (&node.source, &grads.grads[idx]) {
                store.accumulate_grad(*id, g)?;
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        kind: &Primitive,
        inputs: &[Var],
        out: &Tensor,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let val = |i: usize| &self.nodes[inputs[i].0].value;
        let wants = |i: usize| self.nodes[inputs[i].0].requires_grad;
        // Accumulates into the gradient slot of input `i`.
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[inputs[i].0].requires_grad {
                return;
            }
            let slot = &mut grads[inputs[i].0];
            let buf = slot.get_or_insert_with(|| vec![0.0; self.nodes[inputs[i].0].value.len()]);
            f(buf);
        };
        match kind {
            Primitive::Add => {
                acc(0, &mut |ga| add_into(ga, g));
                acc(1, &mut |gb| add_into(gb, g));
            }
            Primitive::Sub => {
                acc(0, &mut |ga| add_into(ga, g));
                acc(1, &mut |gb| {
                    for (x, &d) in gb.iter_mut().zip(g) {
                        *x -= d;
                    }
                });
            }
            Primitive::Mul => {
                let (a, b) = (val(0).data(), val(1).data());
                acc(0, &mut |ga| {
                    for ((x, &d), &bv) in ga.iter_mut().zip(g).zip(b) {
                        *x += d * bv;
                    }
                });
                acc(1, &mut |gb| {
                    for ((x, &d), &av) in gb.iter_mut().zip(g).zip(a) {
                        *x += d * av;
                    }
                });
            }
            Primitive::Div => {
                let (a, b) = (val(0).data(), val(1).data());
                acc(0, &mut |ga| {
                    for ((x, &d), &bv) in ga.iter_mut().zip(g).zip(b) {
                        *x += d / bv;
                    }
                });
                acc(1, &mut |gb| {
                    for (((x, &d), &av), &bv) in gb.iter_mut().zip(g).zip(a).zip(b) {
                        *x -= d * av / (bv * bv);
                    }
                });
            }
            Primitive::AddRow => {
                acc(0, &mut |gx| add_into(gx, g));
                let width = val(1).len().max(1);
                acc(1, &mut |gb| {
                    for row in g.chunks(width) {
                        add_into(gb, row);
                    }
                });
            }
            Primitive::Affine { scale, .. } => {
                acc(0, &mut |ga| {
                    for (x, &d) in ga.iter_mut().zip(g) {
                        *x += scale * d;
                    }
                });
            }
            Primitive::MatMul => {
                let (a, b) = (val(0), val(1));
                let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let (ad, bd) = (a.data(), b.data());
                acc(0, &mut |ga| {
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            ga[i * q + k] += dot(grow, &bd[k * r..(k + 1) * r]);
                        }
                    }
                });
                acc(1, &mut |gb| {
                    for i in 0..p {
                        let grow = &g[i * r..(i + 1) * r];
                        for k in 0..q {
                            let aik = ad[i * q + k];
                            if aik == 0.0 {
                                continue;
                            }
                            for (x, &d) in gb[k * r..(k + 1) * r].iter_mut().zip(grow) {
                                *x += aik * d;
                            }
                        }
                    }
                });
            }
            Primitive::MatMulNt => {
                let (a, b) = (val(0), val(1));
                let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[0]);
                let (ad, bd) = (a.data(), b.data());
                acc(0, &mut |ga| {
                    for i in 0..p {
                        let garow = &mut ga[i * q..(i + 1) * q];
                        for j in 0..r {
                            let d = g[i * r + j];
                            if d == 0.0 {
                                continue;
                            }
                            for (x, &bv) in garow.iter_mut().zip(&bd[j * q..(j + 1) * q]) {
                                *x += d * bv;
                            }
                        }
                    }
                });
                acc(1, &mut |gb| {
                    for i in 0..p {
                        let arow = &ad[i * q..(i + 1) * q];
                        for j in 0..r {
                            let d = g[i * r + j];
                            if d == 0.0 {
                                continue;
                            }
                            for (x, &av) in gb[j * q..(j + 1) * q].iter_mut().zip(arow) {
                                *x += d * av;
                            }
                        }
                    }
                });
            }
            Primitive::MatVec => {
                let (a, x) = (val(0), val(1));
                let (p, q) = (a.shape()[0], a.shape()[1]);
                acc(0, &mut |ga| {
                    for i in 0..p {
                        for (e, &xv) in ga[i * q..(i + 1) * q].iter_mut().zip(x.data()) {
                            *e += g[i] * xv;
                        }
                    }
                });
                acc(1, &mut |gx| {
                    for i in 0..p {
                        for (e, &av) in gx.iter_mut().zip(&a.data()[i * q..(i + 1) * q]) {
                            *e += g[i] * av;
                        }
                    }
                });
            }
            Primitive::BatchMatVec => {
                let (a, x) = (val(0), val(1));
                let (nb, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                acc(0, &mut |ga| {
                    for b in 0..nb {
                        let xb = &x.data()[b * q..(b + 1) * q];
                        for i in 0..p {
                            let d = g[b * p + i];
                            let base = (b * p + i) * q;
                            for (e, &xv) in ga[base..base + q].iter_mut().zip(xb) {
                                *e += d * xv;
                            }
                        }
                    }
                });
                acc(1, &mut |gx| {
                    for b in 0..nb {
                        let gxb = &mut gx[b * q..(b + 1) * q];
                        for i in 0..p {
                            let d = g[b * p + i];
                            let base = (b * p + i) * q;
                            for (e, &av) in gxb.iter_mut().zip(&a.data()[base..base + q]) {
                                *e += d * av;
                            }
                        }
                    }
                });
            }
            Primitive::Concat { axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for i in 0..inputs.len() {
                    let dim = val(i).shape()[*axis];
                    acc(i, &mut |gi| {
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            add_into(&mut gi[o * dim * inner..(o + 1) * dim * inner], &g[from..from + dim * inner]);
                        }
                    });
                    offset += dim;
                }
            }
            Primitive::Slice { axis, start, len } => {
                let (outer, dim, inner) = axis_split(val(0).shape(), *axis);
                acc(0, &mut |ga| {
                    for o in 0..outer {
                        let to = (o * dim + start) * inner;
                        add_into(&mut ga[to..to + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Primitive::Reshape { .. } => acc(0, &mut |ga| add_into(ga, g)),
            Primitive::Relu => {
                let a = val(0).data();
                acc(0, &mut |ga| {
                    for ((x, &d), &av) in ga.iter_mut().zip(g).zip(a) {
                        if av > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Primitive::EluPlusOne => {
                let (a, y) = (val(0).data(), out.data());
                acc(0, &mut |ga| {
                    for (((x, &d), &av), &yv) in ga.iter_mut().zip(g).zip(a).zip(y) {
                        *x += if av >= 0.0 { d } else { d * yv };
                    }
                });
            }
            Primitive::Sqrt => {
                let y = out.data();
                acc(0, &mut |ga| {
                    for ((x, &d), &yv) in ga.iter_mut().zip(g).zip(y) {
                        // The derivative is unbounded at zero; a zero gradient
                        // is used there so an exact fit does not poison BPTT.
                        if yv > 0.0 {
                            *x += d / (2.0 * yv);
                        }
                    }
                });
            }
            Primitive::Log => {
                let a = val(0).data();
                acc(0, &mut |ga| {
                    for ((x, &d), &av) in ga.iter_mut().zip(g).zip(a) {
                        *x += d / av;
                    }
                });
            }
            Primitive::Softmax => {
                let y = out.data();
                let width = *out.shape().last().unwrap_or(&1);
                acc(0, &mut |ga| {
                    for ((grow, yrow), garow) in
                        g.chunks(width).zip(y.chunks(width)).zip(ga.chunks_mut(width))
                    {
                        let inner = dot(grow, yrow);
                        for ((x, &d), &yv) in garow.iter_mut().zip(grow).zip(yrow) {
                            *x += yv * (d - inner);
                        }
                    }
                });
            }
            Primitive::Sum => {
                let d = g[0];
                acc(0, &mut |ga| ga.iter_mut().for_each(|x| *x += d));
            }
            Primitive::SelectRows { mask } => {
                let width = out.len() / mask.len();
                for (input, pick) in [(0, true), (1, false)] {
                    acc(input, &mut |gi| {
                        for (r, &keep) in mask.iter().enumerate() {
                            if keep == pick {
                                let span = r * width..(r + 1) * width;
                                add_into(&mut gi[span.clone()], &g[span]);
                            }
                        }
                    });
                }
            }
            Primitive::ClampAbs => {
                let (a, bound) = (val(0).data(), val(1).data());
                acc(0, &mut |ga| {
                    for (i, x) in ga.iter_mut().enumerate() {
                        if a[i].abs() <= bound[i].abs() {
                            *x += g[i];
                        }
                    }
                });
                if wants(1) {
                    acc(1, &mut |gr| {
                        for (i, x) in gr.iter_mut().enumerate() {
                            let r = bound[i].abs();
                            if a[i].abs() > r {
                                // d|r|/dr times the sign of the clamped side.
                                *x += g[i] * a[i].signum() * bound[i].signum();
                            }
                        }
                    });
                }
            }
        }
    }
}

/// Convenience constructors over [`Graph::apply`].
impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(Primitive::AddRow, &[x, bias])
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::Affine { scale, shift }, &[a])
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Result<Var> {
        self.affine(a, scale, 0.0)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        self.affine(a, -1.0, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMulNt, &[a, b])
    }

    pub fn matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::MatVec, &[a, x])
    }

    pub fn batch_matvec(&mut self, a: Var, x: Var) -> Result<Var> {
        self.apply(Primitive::BatchMatVec, &[a, x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::EluPlusOne, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn select_rows(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::SelectRows { mask: mask.to_vec() }, &[a, b])
    }

    pub fn clamp_abs(&mut self, a: Var, bound: Var) -> Result<Var> {
        self.apply(Primitive::ClampAbs, &[a, bound])
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
