//! Reverse-mode differentiation over dense tensors.
//!
//! Every op on a [`Var`] evaluates eagerly and appends a node to its [`Tape`].
//! Node ids are assigned in creation order, so inputs always precede the node
//! that consumes them and [`Tape::backward`] is a single reverse sweep.

use std::cell::{Cell, RefCell};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use super::tensor::{gemm, Tensor};
use super::NumericsError;

/// Additive attention/logit mask value. `exp(NEG_MASK - max)` underflows to
/// exactly zero for any finite row maximum.
pub const NEG_MASK: f64 = -1e30;

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

type BackwardFn = dyn Fn(&Tensor, &[Arc<Tensor>]) -> Vec<Tensor>;

#[derive(Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias(usize, usize),
    Transpose(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Gather(usize, Rc<Vec<usize>>),
    Tanh(usize),
    Gelu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LogSumExpRows(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    CrossEntropyRows(usize, Rc<Vec<usize>>),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Arc<Tensor>,
        inv_std: Rc<Vec<f64>>,
    },
    Custom {
        inputs: Vec<usize>,
        backward: Rc<BackwardFn>,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::Gather(..) => "gather",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax",
            Op::LogSoftmaxRows(..) => "log_softmax",
            Op::LogSumExpRows(..) => "logsumexp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::CrossEntropyRows(..) => "cross_entropy",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Custom { .. } => "custom",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::Gather(a, _)
            | Op::Tanh(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::LogSumExpRows(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::CrossEntropyRows(a, _) => vec![*a],
            Op::ConcatRows(v) | Op::ConcatCols(v) => v.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records the operations of one forward pass. Single-use: once
/// [`Tape::backward`] has run, further recording or a second backward fails.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("consumed", &self.consumed.get())
            .finish()
    }
}

/// Handle to a recorded tensor.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
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

    /// Op kinds in recording order.
    pub fn op_kinds(&self) -> Vec<&'static str> {
        self.nodes.borrow().iter().map(|n| n.op.kind()).collect()
    }

    /// Input ids of every node, in recording order.
    pub fn node_inputs(&self) -> Vec<Vec<usize>> {
        self.nodes.borrow().iter().map(|n| n.op.inputs()).collect()
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var<'_>, NumericsError> {
        self.push_rc(Arc::new(value), op)
    }

    fn push_rc(&self, value: Arc<Tensor>, op: Op) -> Result<Var<'_>, NumericsError> {
        if self.consumed.get() {
            return Err(NumericsError::TapeConsumed);
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = match op {
            Op::Leaf => false,
            _ => op.inputs().iter().any(|&i| nodes[i].requires_grad),
        };
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self, id })
    }

    /// Trainable leaf. The tensor is shared, not copied.
    pub fn param(&self, value: Arc<Tensor>) -> Var<'_> {
        let v = self
            .push_rc(value, Op::Leaf)
            .expect("recording a leaf on a consumed tape");
        self.nodes.borrow_mut()[v.id].requires_grad = true;
        v
    }

    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.param(Arc::new(value))
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
            .expect("recording a constant on a consumed tape")
    }

    /// Records an op whose value was computed by the caller and whose
    /// backward rule maps `(output_grad, input_values)` to one gradient per
    /// input.
    pub fn custom<'t>(
        &'t self,
        inputs: &[Var<'t>],
        value: Tensor,
        backward: impl Fn(&Tensor, &[Arc<Tensor>]) -> Vec<Tensor> + 'static,
    ) -> Result<Var<'t>, NumericsError> {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                backward: Rc::new(backward),
            },
        )
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, NumericsError> {
        if self.consumed.replace(true) {
            return Err(NumericsError::TapeConsumed);
        }
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.id].value;
        if !loss_value.is_scalar() {
            return Err(NumericsError::NonScalarLoss {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::filled(loss_value.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, contribution) in backward_node(&nodes, node, &g) {
                if !nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Gradients of one backward pass, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        self.get_id(var.id)
    }

    pub(crate) fn get_id(&self, id: usize) -> Tensor {
        match &self.grads[id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id]),
        }
    }

    pub(crate) fn take_id(&mut self, id: usize) -> Tensor {
        match self.grads[id].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[id]),
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected a matrix, got shape {:?}", other))),
    }
}

/// Rows and columns of a rank-1 (one row) or rank-2 tensor.
fn row_view(t: &Tensor, op: &'static str) -> Result<(usize, usize), NumericsError> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(op, format!("expected rank 1 or 2, got shape {:?}", other))),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Max-shifted `log(sum(exp(xs)))`.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a rank-1 or rank-2 tensor, outside any tape.
pub fn softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    let cols = t.cols();
    if cols > 0 {
        for row in out.data_mut().chunks_mut(cols) {
            softmax_in_place(row);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let val = |id: usize| -> &Tensor { &nodes[id].value };
    let out = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            let mut ga = Tensor::zeros(av.shape());
            gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), false);
            let mut gb = Tensor::zeros(bv.shape());
            gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), false);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
        Op::Mul(a, b) => {
            let ga = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect(),
            )
            .expect("same shape");
            let gb = Tensor::new(
                g.shape().to_vec(),
                g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect(),
            )
            .expect("same shape");
            vec![(*a, ga), (*b, gb)]
        }
        Op::Scale(a, s) => vec![(*a, g.map(|x| x * s))],
        Op::AddBias(a, b) => {
            let n = val(*b).len();
            let mut gb = vec![0.0; n];
            for row in g.data().chunks(n) {
                for (acc, x) in gb.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            let gb = Tensor::new(val(*b).shape().to_vec(), gb).expect("bias shape");
            vec![(*a, g.clone()), (*b, gb)]
        }
        Op::Transpose(a) => {
            let (r, c) = (out.rows(), out.cols());
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g.data()[i * c + j];
                }
            }
            vec![(*a, Tensor::new(vec![c, r], ga).expect("transpose"))]
        }
        Op::ConcatRows(ids) => {
            let mut offset = 0;
            ids.iter()
                .map(|&id| {
                    let n = val(id).len();
                    let part = Tensor::new(val(id).shape().to_vec(), g.data()[offset..offset + n].to_vec())
                        .expect("concat part");
                    offset += n;
                    (id, part)
                })
                .collect()
        }
        Op::ConcatCols(ids) => {
            let rows = out.rows();
            let total = out.cols();
            let mut col = 0;
            ids.iter()
                .map(|&id| {
                    let c = val(id).cols();
                    let mut part = Vec::with_capacity(rows * c);
                    for r in 0..rows {
                        part.extend_from_slice(&g.data()[r * total + col..r * total + col + c]);
                    }
                    col += c;
                    (id, Tensor::new(val(id).shape().to_vec(), part).expect("concat part"))
                })
                .collect()
        }
        Op::SliceRows(a, start) => {
            let mut ga = Tensor::zeros(val(*a).shape());
            let c = val(*a).cols();
            ga.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![(*a, ga)]
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let (rows, total) = (src.rows(), src.cols());
            let c = out.cols();
            let mut ga = Tensor::zeros(src.shape());
            for r in 0..rows {
                ga.data_mut()[r * total + start..r * total + start + c]
                    .copy_from_slice(&g.data()[r * c..(r + 1) * c]);
            }
            vec![(*a, ga)]
        }
        Op::Gather(table, ids) => {
            let tv = val(*table);
            let d = tv.cols();
            let mut gt = Tensor::zeros(tv.shape());
            for (r, &id) in ids.iter().enumerate() {
                let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                for (acc, x) in dst.iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                    *acc += x;
                }
            }
            vec![(*table, gt)]
        }
        Op::Tanh(a) => {
            let data = g.data().iter().zip(out.data()).map(|(gi, y)| gi * (1.0 - y * y)).collect();
            vec![(*a, Tensor::new(g.shape().to_vec(), data).expect("tanh"))]
        }
        Op::Gelu(a) => {
            let data = g
                .data()
                .iter()
                .zip(val(*a).data())
                .map(|(gi, &x)| gi * gelu_grad(x))
                .collect();
            vec![(*a, Tensor::new(g.shape().to_vec(), data).expect("gelu"))]
        }
        Op::SoftmaxRows(a) => {
            let cols = out.cols();
            let mut ga = Vec::with_capacity(out.len());
            for (yr, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                let dot: f64 = yr.iter().zip(gr).map(|(y, gi)| y * gi).sum();
                ga.extend(yr.iter().zip(gr).map(|(y, gi)| y * (gi - dot)));
            }
            vec![(*a, Tensor::new(out.shape().to_vec(), ga).expect("softmax"))]
        }
        Op::LogSoftmaxRows(a) => {
            let cols = out.cols();
            let mut ga = Vec::with_capacity(out.len());
            for (yr, gr) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                let total: f64 = gr.iter().sum();
                ga.extend(yr.iter().zip(gr).map(|(y, gi)| gi - y.exp() * total));
            }
            vec![(*a, Tensor::new(out.shape().to_vec(), ga).expect("log_softmax"))]
        }
        Op::LogSumExpRows(a) => {
            let x = val(*a);
            let cols = x.cols();
            let mut ga = Vec::with_capacity(x.len());
            for ((xr, lse), gi) in x.data().chunks(cols).zip(out.data()).zip(g.data()) {
                ga.extend(xr.iter().map(|xi| gi * (xi - lse).exp()));
            }
            vec![(*a, Tensor::new(x.shape().to_vec(), ga).expect("logsumexp"))]
        }
        Op::Sum(a) => vec![(*a, Tensor::filled(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let n = val(*a).len() as f64;
            vec![(*a, Tensor::filled(val(*a).shape(), g.item() / n))]
        }
        Op::MeanRows(a) => {
            let x = val(*a);
            let rows = x.rows();
            let scale = 1.0 / rows as f64;
            let mut ga = Vec::with_capacity(x.len());
            for _ in 0..rows {
                ga.extend(g.data().iter().map(|gi| gi * scale));
            }
            vec![(*a, Tensor::new(x.shape().to_vec(), ga).expect("mean_rows"))]
        }
        Op::CrossEntropyRows(a, targets) => {
            let x = val(*a);
            let cols = x.cols();
            let scale = g.item();
            let mut ga = Vec::with_capacity(x.len());
            for (xr, &t) in x.data().chunks(cols).zip(targets.iter()) {
                let mut p = xr.to_vec();
                softmax_in_place(&mut p);
                p[t] -= 1.0;
                ga.extend(p.iter().map(|pi| pi * scale));
            }
            vec![(*a, Tensor::new(x.shape().to_vec(), ga).expect("cross_entropy"))]
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let gv = val(*gain);
            let d = gv.len();
            let mut gx = Vec::with_capacity(xhat.len());
            let mut ggain = vec![0.0; d];
            let mut gbias = vec![0.0; d];
            for ((xr, gr), &istd) in xhat.data().chunks(d).zip(g.data().chunks(d)).zip(inv_std.iter()) {
                let mut dxhat = vec![0.0; d];
                for j in 0..d {
                    ggain[j] += gr[j] * xr[j];
                    gbias[j] += gr[j];
                    dxhat[j] = gr[j] * gv.data()[j];
                }
                let mean_d: f64 = dxhat.iter().sum::<f64>() / d as f64;
                let mean_dx: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                gx.extend((0..d).map(|j| istd * (dxhat[j] - mean_d - xr[j] * mean_dx)));
            }
            vec![
                (*x, Tensor::new(val(*x).shape().to_vec(), gx).expect("layer_norm")),
                (*gain, Tensor::new(gv.shape().to_vec(), ggain).expect("layer_norm")),
                (*bias, Tensor::new(val(*bias).shape().to_vec(), gbias).expect("layer_norm")),
            ]
        }
        Op::Custom { inputs, backward } => {
            let values: Vec<Arc<Tensor>> = inputs.iter().map(|&i| Arc::clone(&nodes[i].value)).collect();
            inputs.iter().copied().zip(backward(g, &values)).collect()
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'t>, op: &'static str) -> Result<(), NumericsError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(shape_err(op, "operands recorded on different tapes".into()))
        }
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(&rhs, "matmul")?;
        let (a, b) = (self.value(), rhs.value());
        let (m, k) = dims2(&a, "matmul")?;
        let (k2, n) = dims2(&b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{}, {}] x [{}, {}]", m, k, k2, n)));
        }
        let mut out = Tensor::zeros(&[m, n]);
        gemm(m, k, n, a.data(), false, b.data(), false, out.data_mut(), false);
        self.tape.push(out, Op::MatMul(self.id, rhs.id))
    }

    fn zip_with(self, rhs: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, NumericsError> {
        self.same_tape(&rhs, op)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let out = self.zip_with(rhs, "add", |x, y| x + y)?;
        self.tape.push(out, Op::Add(self.id, rhs.id))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let out = self.zip_with(rhs, "mul", |x, y| x * y)?;
        self.tape.push(out, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, NumericsError> {
        let out = self.value().map(|x| x * factor);
        self.tape.push(out, Op::Scale(self.id, factor))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>, NumericsError> {
        self.same_tape(&bias, "add_bias")?;
        let (a, b) = (self.value(), bias.value());
        let (_, n) = row_view(&a, "add_bias")?;
        if b.rank() != 1 || b.len() != n {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", a.shape(), b.shape())));
        }
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.tape.push(out, Op::AddBias(self.id, bias.id))
    }

    pub fn transpose(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (r, c) = dims2(&a, "transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        self.tape.push(Tensor::new(vec![c, r], out)?, Op::Transpose(self.id))
    }

    /// Stacks matrices (or vectors, as rows) vertically.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_rows", "no operands".into()))?;
        let cols = first.value().cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            first.same_tape(p, "concat_rows")?;
            let v = p.value();
            let (r, c) = row_view(&v, "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("{} columns vs {}", c, cols)));
            }
            rows += r;
            data.extend_from_slice(v.data());
        }
        first
            .tape
            .push(Tensor::new(vec![rows, cols], data)?, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Joins matrices (or vectors, as single rows) side by side.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat_cols", "no operands".into()))?;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let rows = row_view(&values[0], "concat_cols")?.0;
        let mut total = 0;
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p, "concat_cols")?;
            let (r, c) = row_view(v, "concat_cols")?;
            if r != rows {
                return Err(shape_err("concat_cols", format!("{} rows vs {}", r, rows)));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let shape = if values.iter().all(|v| v.rank() == 1) {
            vec![total]
        } else {
            vec![rows, total]
        };
        first
            .tape
            .push(Tensor::new(shape, data)?, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (r, c) = dims2(&a, "slice_rows")?;
        if start > end || end > r {
            return Err(shape_err("slice_rows", format!("{}..{} of {} rows", start, end, r)));
        }
        let out = Tensor::new(vec![end - start, c], a.data()[start * c..end * c].to_vec())?;
        self.tape.push(out, Op::SliceRows(self.id, start))
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(self, index: usize) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (r, c) = dims2(&a, "row")?;
        if index >= r {
            return Err(shape_err("row", format!("row {} of {}", index, r)));
        }
        let out = Tensor::new(vec![c], a.row(index).to_vec())?;
        self.tape.push(out, Op::SliceRows(self.id, index))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(self, start: usize, end: usize) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (r, c) = dims2(&a, "slice_cols")?;
        if start > end || end > c {
            return Err(shape_err("slice_cols", format!("{}..{} of {} columns", start, end, c)));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&a.data()[i * c + start..i * c + end]);
        }
        self.tape.push(Tensor::new(vec![r, w], data)?, Op::SliceCols(self.id, start))
    }

    /// Embedding lookup: rows `ids` of a `[V, d]` table.
    pub fn gather(self, ids: &[usize]) -> Result<Var<'t>, NumericsError> {
        let table = self.value();
        let (v, d) = dims2(&table, "gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(shape_err("gather", format!("id {} outside table of {} rows", bad, v)));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(table.row(i));
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.tape.push(out, Op::Gather(self.id, Rc::new(ids.to_vec())))
    }

    pub fn tanh(self) -> Result<Var<'t>, NumericsError> {
        let out = self.value().map(f64::tanh);
        self.tape.push(out, Op::Tanh(self.id))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Result<Var<'t>, NumericsError> {
        let out = self.value().map(gelu);
        self.tape.push(out, Op::Gelu(self.id))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        row_view(&a, "softmax")?;
        self.tape.push(softmax(&a), Op::SoftmaxRows(self.id))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (_, cols) = row_view(&a, "log_softmax")?;
        let mut out = (*a).clone();
        for row in out.data_mut().chunks_mut(cols) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|x| *x -= lse);
        }
        self.tape.push(out, Op::LogSoftmaxRows(self.id))
    }

    /// Logsumexp along the last axis: `[n] -> []`, `[m, n] -> [m]`.
    pub fn logsumexp(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (rows, cols) = row_view(&a, "logsumexp")?;
        if cols == 0 {
            return Err(shape_err("logsumexp", "empty reduction axis".into()));
        }
        let data: Vec<f64> = a.data().chunks(cols).map(logsumexp).collect();
        let shape = if a.rank() == 1 { vec![] } else { vec![rows] };
        self.tape.push(Tensor::new(shape, data)?, Op::LogSumExpRows(self.id))
    }

    pub fn sum(self) -> Result<Var<'t>, NumericsError> {
        let out = Tensor::scalar(self.value().data().iter().sum());
        self.tape.push(out, Op::Sum(self.id))
    }

    pub fn mean(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        if a.is_empty() {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let out = Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64);
        self.tape.push(out, Op::Mean(self.id))
    }

    /// Column means of an `[m, n]` matrix, giving `[n]`.
    pub fn mean_rows(self) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (r, c) = dims2(&a, "mean_rows")?;
        if r == 0 {
            return Err(shape_err("mean_rows", "no rows".into()));
        }
        let mut out = vec![0.0; c];
        for row in a.data().chunks(c) {
            for (acc, x) in out.iter_mut().zip(row) {
                *acc += x;
            }
        }
        out.iter_mut().for_each(|x| *x /= r as f64);
        self.tape.push(Tensor::vector(out), Op::MeanRows(self.id))
    }

    /// Sum over rows of `-log_softmax(row)[target]`.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        let (rows, cols) = row_view(&a, "cross_entropy")?;
        if targets.len() != rows {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} rows", targets.len(), rows),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err("cross_entropy", format!("target {} of {} classes", bad, cols)));
        }
        let total: f64 = a
            .data()
            .chunks(cols)
            .zip(targets)
            .map(|(row, &t)| logsumexp(row) - row[t])
            .sum();
        self.tape.push(
            Tensor::scalar(total),
            Op::CrossEntropyRows(self.id, Rc::new(targets.to_vec())),
        )
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, NumericsError> {
        let x = self.value();
        let (_, d) = row_view(&x, "layer_norm")?;
        let (gv, bv) = (gain.value(), bias.value());
        if gv.len() != d || bv.len() != d {
            return Err(shape_err(
                "layer_norm",
                format!("width {} with gain {:?}, bias {:?}", d, gv.shape(), bv.shape()),
            ));
        }
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(x.rows());
        for row in x.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(istd);
            xhat.extend(row.iter().map(|v| (v - mean) * istd));
        }
        let xhat = Tensor::new(x.shape().to_vec(), xhat)?;
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for j in 0..d {
                row[j] = row[j] * gv.data()[j] + bv.data()[j];
            }
        }
        self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat: Arc::new(xhat),
                inv_std: Rc::new(inv_std),
            },
        )
    }

    /// Same data under a new shape.
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, NumericsError> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.len() {
            return Err(shape_err("reshape", format!("{:?} to {:?}", a.shape(), shape)));
        }
        let out = Tensor::new(shape.to_vec(), a.data().to_vec())?;
        let original = a.shape().to_vec();
        self.tape.custom(&[self], out, move |g, _| {
            vec![Tensor::new(original.clone(), g.data().to_vec()).expect("reshape")]
        })
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map_with_grad(
        self,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64) -> f64 + 'static,
    ) -> Result<Var<'t>, NumericsError> {
        let out = self.value().map(f);
        self.tape.custom(&[self], out, move |g, inputs| {
            let data = g.data().iter().zip(inputs[0].data()).map(|(gi, &x)| gi * df(x)).collect();
            vec![Tensor::new(g.shape().to_vec(), data).expect("map")]
        })
    }
}
