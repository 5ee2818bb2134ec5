//! Wengert-list reverse-mode autodiff.
//!
//! A [`GradTape`] owns every tensor created during a forward pass. Leaves
//! enter through [`GradTape::param`] (tracked) or [`GradTape::constant`]
//! (untracked); interior nodes are produced by [`GradTape::apply`] with an
//! [`OpKind`]. An application is only recorded when at least one input is
//! tracked, so inference-mode graphs built from constants cost nothing at
//! backward time.
//!
//! [`GradTape::backward`] seeds the root with 1.0 and walks the recorded
//! applications once, in reverse creation order. Creation order is a
//! topological order, so its reverse is a valid schedule and every node's
//! gradient is complete before it is consumed. Accumulation is plain
//! elementwise addition in slot order, which keeps the whole pass
//! bit-deterministic regardless of thread count (parallel callers build
//! one tape per sample and reduce outside).

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::Tensor;

/// Value used to blank out disallowed attention positions. Large enough
/// that softmax underflows it to exactly zero, small enough to stay
/// finite through intermediate arithmetic.
pub const MASK_FILL: f64 = -1.0e30;

/// Inputs to `Exp` are saturated to this magnitude so the output stays
/// finite; the gradient is zero in the saturated region.
pub const EXP_INPUT_LIMIT: f64 = 700.0;

/// Handle to a node on one specific tape. Ids are tape-local; using a
/// handle from another tape is either caught by a bounds check or yields
/// a wrong-shape error, never silent reuse of freed memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The closed catalogue of differentiable primitives.
///
/// Shape contracts (row-major, `r x c` matrices, `[n]` vectors):
/// * `MatMul`: `(m x k, k x n) -> m x n`
/// * `MatMulTransposeB`: `(m x k, n x k) -> m x n`, i.e. `A * B^T`
/// * `Add` / `Sub` / `Mul`: equal shapes, or matrix lhs with a vector rhs
///   broadcast across rows
/// * `Scale`: multiply by a compile-time constant
/// * `ConcatLastAxis`: matrices with equal row counts side by side, or
///   vectors end to end
/// * `RowGather`: pick rows of a matrix by index, duplicates allowed
/// * `SelectEntries`: pick individual `(row, col)` entries into a vector
/// * `SoftmaxLastAxis` / `LogSoftmaxLastAxis`: per row, max-subtracted
/// * `LayerNorm`: `(x, gain, bias)` normalised per row
/// * `Relu` / `Gelu` / `Sigmoid` / `Softplus` / `Ln` / `Exp`: elementwise;
///   `Ln` rejects non-positive inputs, `Exp` saturates at
///   [`EXP_INPUT_LIMIT`]
/// * `Mean` / `Sum`: full reduction to a one-element tensor
/// * `CausalMaskFill`: square matrix, strictly-upper entries replaced by
///   [`MASK_FILL`]
/// * `Clamp`: elementwise clamp; gradient passes on the closed interval
///   `[lo, hi]` so a value sitting exactly on a bound still trains
/// * `Minimum`: elementwise minimum; on ties the gradient goes to the
///   left operand
#[derive(Clone, Debug)]
pub enum OpKind {
    MatMul,
    MatMulTransposeB,
    Add,
    Sub,
    Mul,
    Scale(f64),
    ConcatLastAxis,
    RowGather(Vec<usize>),
    SelectEntries(Vec<(usize, usize)>),
    SoftmaxLastAxis,
    LogSoftmaxLastAxis,
    LayerNorm { eps: f64 },
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Ln,
    Exp,
    Mean,
    Sum,
    CausalMaskFill,
    Clamp { lo: f64, hi: f64 },
    Minimum,
}

impl OpKind {
    /// Stable name used in error messages and the gradient-check suite.
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulTransposeB => "matmul_tb",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::ConcatLastAxis => "concat",
            OpKind::RowGather(_) => "row_gather",
            OpKind::SelectEntries(_) => "select_entries",
            OpKind::SoftmaxLastAxis => "softmax",
            OpKind::LogSoftmaxLastAxis => "log_softmax",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Softplus => "softplus",
            OpKind::Ln => "ln",
            OpKind::Exp => "exp",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::CausalMaskFill => "causal_mask_fill",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Minimum => "minimum",
        }
    }

    fn arity_ok(&self, n: usize) -> bool {
        match self {
            OpKind::ConcatLastAxis => n >= 1,
            OpKind::LayerNorm { .. } => n == 3,
            OpKind::MatMul
            | OpKind::MatMulTransposeB
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Minimum => n == 2,
            _ => n == 1,
        }
    }
}

struct NodeRecord {
    value: Tensor,
    requires_grad: bool,
}

struct AppRecord {
    kind: OpKind,
    inputs: Vec<NodeId>,
    output: usize,
}

/// Recording tape. See the module docs for the execution model.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<NodeRecord>,
    apps: Vec<AppRecord>,
}

impl GradTape {
    pub fn new() -> GradTape {
        GradTape::default()
    }

    /// Registers a tracked leaf (a trainable parameter).
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(value, true)
    }

    /// Registers an untracked leaf (input data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, false)
    }

    /// Registers a leaf whose tracking follows the tensor's own flag.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        let track = value.requires_grad();
        self.push(value, track)
    }

    fn push(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(NodeRecord {
            value: value.with_requires_grad(requires_grad),
            requires_grad,
        });
        NodeId(id)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn num_recorded_ops(&self) -> usize {
        self.apps.len()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Applies a primitive, returning the output node. The application is
    /// recorded for backward only if some input is tracked.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if !kind.arity_ok(inputs.len()) {
            return Err(Error::shape(
                kind.name(),
                format!("wrong number of inputs: {}", inputs.len()),
            ));
        }
        for id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::value(
                    kind.name(),
                    format!("input node {} is not on this tape", id.0),
                ));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let out = forward(&kind, &values)?;
        let track = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let out_id = self.push(out, track);
        if track {
            self.apps.push(AppRecord {
                kind,
                inputs: inputs.to_vec(),
                output: out_id.0,
            });
        }
        Ok(out_id)
    }

    /// Reverse pass from a one-element root. Stateless: calling it twice
    /// on the same tape produces identical results. Tracked nodes that the
    /// root does not reach simply stay absent from the result; use
    /// [`Gradients::get_or_zeros`] when a dense view is wanted.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::value(
                "backward",
                format!("root node {} is not on this tape", root.0),
            ));
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must hold one element, found shape {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(vec![1.0]);
        for app in self.apps.iter().rev() {
            let Some(grad_out) = grads[app.output].clone() else {
                continue;
            };
            let values: Vec<&Tensor> = app.inputs.iter().map(|id| &self.nodes[id.0].value).collect();
            let needs: Vec<bool> = app
                .inputs
                .iter()
                .map(|id| self.nodes[id.0].requires_grad)
                .collect();
            let output_value = &self.nodes[app.output].value;
            let contribs = backward_op(&app.kind, &values, &needs, output_value, &grad_out);
            for (slot, contrib) in contribs.into_iter().enumerate() {
                let Some(contrib) = contrib else { continue };
                let target = app.inputs[slot].0;
                match &mut grads[target] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(contrib.iter()) {
                            *a += c;
                        }
                    }
                    slot_grad @ None => *slot_grad = Some(contrib),
                }
            }
        }
        Ok(Gradients { grads })
    }

    // Convenience wrappers. These exist so call sites read like the math.

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn matmul_tb(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMulTransposeB, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(factor), &[a])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        self.apply(OpKind::ConcatLastAxis, parts)
    }

    pub fn row_gather(&mut self, a: NodeId, rows: Vec<usize>) -> Result<NodeId> {
        self.apply(OpKind::RowGather(rows), &[a])
    }

    pub fn select_entries(&mut self, a: NodeId, entries: Vec<(usize, usize)>) -> Result<NodeId> {
        self.apply(OpKind::SelectEntries(entries), &[a])
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::SoftmaxLastAxis, &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSoftmaxLastAxis, &[a])
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> Result<NodeId> {
        self.apply(OpKind::LayerNorm { eps }, &[x, gain, bias])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Gelu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Softplus, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Ln, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mean, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sum, &[a])
    }

    pub fn causal_mask_fill(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::CausalMaskFill, &[a])
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        self.apply(OpKind::Clamp { lo, hi }, &[a])
    }

    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Minimum, &[a, b])
    }
}

/// Result of a backward pass. Holds one optional gradient per tape node,
/// including interior nodes, which the masking tests inspect directly.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the root with respect to `id`, if the root reaches it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Dense gradient tensor for `id`; unreached nodes yield zeros of the
    /// node's shape.
    pub fn get_or_zeros(&self, tape: &GradTape, id: NodeId) -> Tensor {
        let shape = tape.value(id).shape().to_vec();
        match self.get(id) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient matches node shape"),
            None => Tensor::zeros(&shape).expect("node shape is valid"),
        }
    }
}

fn forward(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows() {
                return Err(Error::shape(
                    "matmul",
                    format!("{:?} x {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            Tensor::matrix(m, n, kernels::matmul(a.data(), b.data(), m, k, n))
        }
        OpKind::MatMulTransposeB => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
                return Err(Error::shape(
                    "matmul_tb",
                    format!("{:?} x transpose of {:?}", a.shape(), b.shape()),
                ));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            Tensor::matrix(m, n, kernels::matmul_tb(a.data(), b.data(), m, k, n))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let mode = broadcast_mode(kind.name(), a, b)?;
            let f = match kind {
                OpKind::Add => |x: f64, y: f64| x + y,
                OpKind::Sub => |x: f64, y: f64| x - y,
                _ => |x: f64, y: f64| x * y,
            };
            let data = match mode {
                Broadcast::None => a
                    .data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
                Broadcast::RhsRow => {
                    let cols = a.cols();
                    a.data()
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, b.data()[i % cols]))
                        .collect()
                }
            };
            Tensor::new(a.shape().to_vec(), data)
        }
        OpKind::Scale(factor) => {
            let a = inputs[0];
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * factor).collect())
        }
        OpKind::ConcatLastAxis => {
            let rank = inputs[0].rank();
            if inputs.iter().any(|t| t.rank() != rank) {
                return Err(Error::shape("concat", "mixed ranks"));
            }
            if rank == 1 {
                let mut data = Vec::new();
                for t in inputs {
                    data.extend_from_slice(t.data());
                }
                Tensor::from_vec(data)
            } else {
                let rows = inputs[0].rows();
                if inputs.iter().any(|t| t.rows() != rows) {
                    return Err(Error::shape("concat", "row counts differ"));
                }
                let total_cols: usize = inputs.iter().map(|t| t.cols()).sum();
                let mut data = Vec::with_capacity(rows * total_cols);
                for r in 0..rows {
                    for t in inputs {
                        let c = t.cols();
                        data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                }
                Tensor::matrix(rows, total_cols, data)
            }
        }
        OpKind::RowGather(rows) => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(Error::shape("row_gather", "input must be a matrix"));
            }
            if rows.is_empty() {
                return Err(Error::shape("row_gather", "empty row list"));
            }
            let c = a.cols();
            let mut data = Vec::with_capacity(rows.len() * c);
            for &r in rows {
                if r >= a.rows() {
                    return Err(Error::value(
                        "row_gather",
                        format!("row {} out of range for {} rows", r, a.rows()),
                    ));
                }
                data.extend_from_slice(&a.data()[r * c..(r + 1) * c]);
            }
            Tensor::matrix(rows.len(), c, data)
        }
        OpKind::SelectEntries(entries) => {
            let a = inputs[0];
            if a.rank() != 2 {
                return Err(Error::shape("select_entries", "input must be a matrix"));
            }
            if entries.is_empty() {
                return Err(Error::shape("select_entries", "empty entry list"));
            }
            let mut data = Vec::with_capacity(entries.len());
            for &(r, c) in entries {
                if r >= a.rows() || c >= a.cols() {
                    return Err(Error::value(
                        "select_entries",
                        format!("entry ({r}, {c}) out of range for shape {:?}", a.shape()),
                    ));
                }
                data.push(a.at(r, c));
            }
            Tensor::from_vec(data)
        }
        OpKind::SoftmaxLastAxis => {
            let a = inputs[0];
            let (rows, cols) = (a.rows(), a.cols());
            Tensor::new(a.shape().to_vec(), kernels::softmax_rows(a.data(), rows, cols))
        }
        OpKind::LogSoftmaxLastAxis => {
            let a = inputs[0];
            let (rows, cols) = (a.rows(), a.cols());
            Tensor::new(a.shape().to_vec(), kernels::log_softmax_rows(a.data(), rows, cols))
        }
        OpKind::LayerNorm { eps } => {
            let (x, gain, bias) = (inputs[0], inputs[1], inputs[2]);
            if gain.rank() != 1 || bias.rank() != 1 || gain.cols() != x.cols() || bias.cols() != x.cols() {
                return Err(Error::shape(
                    "layer_norm",
                    format!(
                        "x {:?}, gain {:?}, bias {:?}",
                        x.shape(),
                        gain.shape(),
                        bias.shape()
                    ),
                ));
            }
            let (rows, cols) = (x.rows(), x.cols());
            Tensor::new(
                x.shape().to_vec(),
                kernels::layer_norm_rows(x.data(), gain.data(), bias.data(), rows, cols, *eps),
            )
        }
        OpKind::Relu => elementwise(inputs[0], |x| x.max(0.0)),
        OpKind::Gelu => elementwise(inputs[0], kernels::gelu),
        OpKind::Sigmoid => elementwise(inputs[0], kernels::sigmoid),
        OpKind::Softplus => elementwise(inputs[0], kernels::softplus),
        OpKind::Ln => {
            let a = inputs[0];
            if let Some(bad) = a.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::value("ln", format!("non-positive input {bad}")));
            }
            elementwise(a, f64::ln)
        }
        OpKind::Exp => elementwise(inputs[0], |x| {
            x.clamp(-EXP_INPUT_LIMIT, EXP_INPUT_LIMIT).exp()
        }),
        OpKind::Mean => {
            let a = inputs[0];
            let n = a.numel() as f64;
            Ok(Tensor::scalar(a.data().iter().sum::<f64>() / n))
        }
        OpKind::Sum => Ok(Tensor::scalar(inputs[0].data().iter().sum())),
        OpKind::CausalMaskFill => {
            let a = inputs[0];
            if a.rank() != 2 || a.rows() != a.cols() {
                return Err(Error::shape(
                    "causal_mask_fill",
                    format!("expected square matrix, found {:?}", a.shape()),
                ));
            }
            let n = a.rows();
            let mut data = a.data().to_vec();
            for i in 0..n {
                for j in (i + 1)..n {
                    data[i * n + j] = MASK_FILL;
                }
            }
            Tensor::matrix(n, n, data)
        }
        OpKind::Clamp { lo, hi } => {
            if lo > hi {
                return Err(Error::value("clamp", format!("lo {lo} > hi {hi}")));
            }
            elementwise(inputs[0], |x| x.clamp(*lo, *hi))
        }
        OpKind::Minimum => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() != b.shape() {
                return Err(Error::shape(
                    "minimum",
                    format!("{:?} vs {:?}", a.shape(), b.shape()),
                ));
            }
            Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data().iter())
                    .map(|(&x, &y)| if x <= y { x } else { y })
                    .collect(),
            )
        }
    }
}

enum Broadcast {
    None,
    RhsRow,
}

fn broadcast_mode(op: &str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::None);
    }
    if a.rank() == 2 && b.rank() == 1 && b.cols() == a.cols() {
        return Ok(Broadcast::RhsRow);
    }
    Err(Error::shape(
        op,
        format!("{:?} vs {:?}", a.shape(), b.shape()),
    ))
}

fn elementwise(a: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

/// Per-input gradient contributions for one application. `None` in a slot
/// means the input is untracked and the work was skipped. Shapes were
/// validated at forward time, so this function cannot fail.
fn backward_op(
    kind: &OpKind,
    inputs: &[&Tensor],
    needs: &[bool],
    output: &Tensor,
    grad_out: &[f64],
) -> Vec<Option<Vec<f64>>> {
    match kind {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let da = needs[0].then(|| kernels::matmul_tb(grad_out, b.data(), m, n, k));
            let db = needs[1].then(|| kernels::matmul_ta(a.data(), grad_out, m, k, n));
            vec![da, db]
        }
        OpKind::MatMulTransposeB => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let da = needs[0].then(|| kernels::matmul(grad_out, b.data(), m, n, k));
            let db = needs[1].then(|| kernels::matmul_ta(grad_out, a.data(), m, n, k));
            vec![da, db]
        }
        OpKind::Add => {
            let da = needs[0].then(|| grad_out.to_vec());
            let db = needs[1].then(|| reduce_to_rhs(inputs[0], inputs[1], grad_out, |g, _| g));
            vec![da, db]
        }
        OpKind::Sub => {
            let da = needs[0].then(|| grad_out.to_vec());
            let db = needs[1].then(|| reduce_to_rhs(inputs[0], inputs[1], grad_out, |g, _| -g));
            vec![da, db]
        }
        OpKind::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = needs[0].then(|| {
                if a.shape() == b.shape() {
                    grad_out
                        .iter()
                        .zip(b.data().iter())
                        .map(|(&g, &y)| g * y)
                        .collect()
                } else {
                    let cols = a.cols();
                    grad_out
                        .iter()
                        .enumerate()
                        .map(|(i, &g)| g * b.data()[i % cols])
                        .collect()
                }
            });
            let db = needs[1].then(|| reduce_to_rhs(a, b, grad_out, |g, i| g * a.data()[i]));
            vec![da, db]
        }
        OpKind::Scale(factor) => {
            vec![needs[0].then(|| grad_out.iter().map(|&g| g * factor).collect())]
        }
        OpKind::ConcatLastAxis => {
            if inputs[0].rank() == 1 {
                let mut offset = 0;
                inputs
                    .iter()
                    .zip(needs.iter())
                    .map(|(t, &need)| {
                        let n = t.numel();
                        let slice = need.then(|| grad_out[offset..offset + n].to_vec());
                        offset += n;
                        slice
                    })
                    .collect()
            } else {
                let rows = inputs[0].rows();
                let total_cols: usize = inputs.iter().map(|t| t.cols()).sum();
                let mut col_offset = 0;
                inputs
                    .iter()
                    .zip(needs.iter())
                    .map(|(t, &need)| {
                        let c = t.cols();
                        let grad = need.then(|| {
                            let mut g = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                let start = r * total_cols + col_offset;
                                g.extend_from_slice(&grad_out[start..start + c]);
                            }
                            g
                        });
                        col_offset += c;
                        grad
                    })
                    .collect()
            }
        }
        OpKind::RowGather(rows) => {
            vec![needs[0].then(|| {
                let a = inputs[0];
                let c = a.cols();
                let mut da = vec![0.0; a.numel()];
                for (out_row, &src_row) in rows.iter().enumerate() {
                    let g = &grad_out[out_row * c..(out_row + 1) * c];
                    let d = &mut da[src_row * c..(src_row + 1) * c];
                    for (dv, &gv) in d.iter_mut().zip(g.iter()) {
                        *dv += gv;
                    }
                }
                da
            })]
        }
        OpKind::SelectEntries(entries) => {
            vec![needs[0].then(|| {
                let a = inputs[0];
                let c = a.cols();
                let mut da = vec![0.0; a.numel()];
                for (i, &(r, col)) in entries.iter().enumerate() {
                    da[r * c + col] += grad_out[i];
                }
                da
            })]
        }
        OpKind::SoftmaxLastAxis => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                kernels::softmax_backward_rows(output.data(), grad_out, a.rows(), a.cols())
            })]
        }
        OpKind::LogSoftmaxLastAxis => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                kernels::log_softmax_backward_rows(output.data(), grad_out, a.rows(), a.cols())
            })]
        }
        OpKind::LayerNorm { eps } => {
            let (x, gain, _) = (inputs[0], inputs[1], inputs[2]);
            if needs.iter().any(|&n| n) {
                let (dx, dgain, dbias) = kernels::layer_norm_backward_rows(
                    x.data(),
                    gain.data(),
                    grad_out,
                    x.rows(),
                    x.cols(),
                    *eps,
                );
                vec![
                    needs[0].then_some(dx),
                    needs[1].then_some(dgain),
                    needs[2].then_some(dbias),
                ]
            } else {
                vec![None, None, None]
            }
        }
        OpKind::Relu => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(grad_out.iter())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect()
            })]
        }
        OpKind::Gelu => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(grad_out.iter())
                    .map(|(&x, &g)| g * kernels::gelu_grad(x))
                    .collect()
            })]
        }
        OpKind::Sigmoid => {
            vec![needs[0].then(|| {
                output
                    .data()
                    .iter()
                    .zip(grad_out.iter())
                    .map(|(&y, &g)| g * y * (1.0 - y))
                    .collect()
            })]
        }
        OpKind::Softplus => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(grad_out.iter())
                    .map(|(&x, &g)| g * kernels::sigmoid(x))
                    .collect()
            })]
        }
        OpKind::Ln => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(grad_out.iter())
                    .map(|(&x, &g)| g / x)
                    .collect()
            })]
        }
        OpKind::Exp => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(output.data().iter())
                    .zip(grad_out.iter())
                    .map(|((&x, &y), &g)| {
                        if x.abs() > EXP_INPUT_LIMIT {
                            0.0
                        } else {
                            g * y
                        }
                    })
                    .collect()
            })]
        }
        OpKind::Mean => {
            let a = inputs[0];
            let n = a.numel() as f64;
            vec![needs[0].then(|| vec![grad_out[0] / n; a.numel()])]
        }
        OpKind::Sum => {
            let a = inputs[0];
            vec![needs[0].then(|| vec![grad_out[0]; a.numel()])]
        }
        OpKind::CausalMaskFill => {
            let a = inputs[0];
            let n = a.rows();
            vec![needs[0].then(|| {
                let mut da = grad_out.to_vec();
                for i in 0..n {
                    for j in (i + 1)..n {
                        da[i * n + j] = 0.0;
                    }
                }
                da
            })]
        }
        OpKind::Clamp { lo, hi } => {
            let a = inputs[0];
            vec![needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(grad_out.iter())
                    .map(|(&x, &g)| if x >= *lo && x <= *hi { g } else { 0.0 })
                    .collect()
            })]
        }
        OpKind::Minimum => {
            let (a, b) = (inputs[0], inputs[1]);
            let da = needs[0].then(|| {
                a.data()
                    .iter()
                    .zip(b.data().iter())
                    .zip(grad_out.iter())
                    .map(|((&x, &y), &g)| if x <= y { g } else { 0.0 })
                    .collect()
            });
            let db = needs[1].then(|| {
                a.data()
                    .iter()
                    .zip(b.data().iter())
                    .zip(grad_out.iter())
                    .map(|((&x, &y), &g)| if x <= y { 0.0 } else { g })
                    .collect()
            });
            vec![da, db]
        }
    }
}

/// Gradient for the rhs of a broadcasting binary op: identity when shapes
/// match, column-sum across rows when the rhs was a broadcast vector.
fn reduce_to_rhs(a: &Tensor, b: &Tensor, grad_out: &[f64], f: impl Fn(f64, usize) -> f64) -> Vec<f64> {
    if a.shape() == b.shape() {
        grad_out
            .iter()
            .enumerate()
            .map(|(i, &g)| f(g, i))
            .collect()
    } else {
        let cols = a.cols();
        let mut db = vec![0.0; cols];
        for (i, &g) in grad_out.iter().enumerate() {
            db[i % cols] += f(g, i);
        }
        db
    }
}
