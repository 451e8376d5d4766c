//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Ops execute eagerly and record a node when any input is tracked.
//! `backward` replays nodes in reverse append order exactly once,
//! accumulating adjoints additively, so gradients are deterministic for a
//! given graph regardless of fan-out.

use crate::error::{Error, Result};

use super::value::{broadcast_shapes, broadcast_strides, FloatWidth, TensorValue};

pub type NodeId = usize;

/// A tensor plus its (optional) handle into the tape. Detached tensors
/// (`node == None`) behave as constants and never accumulate gradient.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub value: TensorValue,
    pub node: Option<NodeId>,
}

impl Tensor {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[f64] {
        self.value.data()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnKind {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    LeakyRelu(f64),
    Square,
    Sqrt,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// Add a compile-time constant.
    Shift(f64),
    /// Clamp into [lo, hi]; zero gradient outside.
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RedKind {
    Sum,
    Mean,
    Max,
    LogSumExp,
}

#[derive(Clone, Debug)]
struct Input {
    id: Option<NodeId>,
    value: TensorValue,
}

impl Input {
    fn of(t: &Tensor) -> Self {
        Input {
            id: t.node,
            value: t.value.clone(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: Input,
        b: Input,
    },
    Unary {
        kind: UnKind,
        x: Input,
    },
    Matmul {
        a: Input,
        b: Input,
    },
    Transpose {
        x: Input,
    },
    Reduce {
        kind: RedKind,
        x: Input,
        axis: Option<usize>,
    },
    L2NormalizeRows {
        x: Input,
        norms: Vec<f64>,
    },
    ConcatCols {
        parts: Vec<Input>,
    },
    SliceCols {
        x: Input,
        start: usize,
        len: usize,
    },
    TakeDiag {
        x: Input,
    },
    /// Hard threshold in the forward pass, relaxed-gate derivative in the
    /// backward pass (straight-through).
    GateSt {
        logits: Input,
        relaxed: Vec<f64>,
        temperature: f64,
    },
}

struct Node {
    op: Op,
    out: TensorValue,
}

/// Append-only gradient tape. One tape per training step; single-threaded.
pub struct Tape {
    nodes: Vec<Node>,
    width: FloatWidth,
}

/// Result of a backward pass: adjoint per tape node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the backward root w.r.t. this tensor, if it was tracked
    /// and reached by the sweep. Missing entries mean zero gradient.
    pub fn get(&self, t: &Tensor) -> Option<TensorValue> {
        let id = t.node?;
        self.grads[id]
            .as_ref()
            .map(|g| TensorValue::new(self.shapes[id].clone(), g.clone()))
    }

    pub fn by_node(&self, id: NodeId) -> Option<TensorValue> {
        self.grads[id]
            .as_ref()
            .map(|g| TensorValue::new(self.shapes[id].clone(), g.clone()))
    }
}

impl Tape {
    pub fn new(width: FloatWidth) -> Self {
        Tape {
            nodes: Vec::new(),
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn width(&self) -> FloatWidth {
        self.width
    }

    /// A tracked input node (parameter or differentiable input).
    pub fn leaf(&mut self, value: TensorValue) -> Tensor {
        let value = value.quantize(self.width);
        let id = self.push(Op::Leaf, value.clone());
        Tensor {
            value,
            node: Some(id),
        }
    }

    /// An untracked constant.
    pub fn constant(&self, value: TensorValue) -> Tensor {
        Tensor {
            value: value.quantize(self.width),
            node: None,
        }
    }

    /// Detach: same value, no gradient flow.
    pub fn stop_grad(&self, t: &Tensor) -> Tensor {
        Tensor {
            value: t.value.clone(),
            node: None,
        }
    }

    fn push(&mut self, op: Op, out: TensorValue) -> NodeId {
        self.nodes.push(Node { op, out });
        self.nodes.len() - 1
    }

    /// Record `op -> out` if any input is tracked; otherwise the result is
    /// a constant.
    fn emit(&mut self, tracked: bool, op: Op, out: TensorValue) -> Tensor {
        let out = out.quantize(self.width);
        if tracked {
            let id = self.push(op, out.clone());
            Tensor {
                value: out,
                node: Some(id),
            }
        } else {
            Tensor {
                value: out,
                node: None,
            }
        }
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn binary(&mut self, kind: BinKind, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let out = binary_forward(kind, &a.value, &b.value)?;
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.emit(
            tracked,
            Op::Binary {
                kind,
                a: Input::of(a),
                b: Input::of(b),
            },
            out,
        ))
    }

    pub fn neg(&mut self, x: &Tensor) -> Tensor {
        self.unary_infallible(UnKind::Neg, x)
    }

    pub fn exp(&mut self, x: &Tensor) -> Tensor {
        self.unary_infallible(UnKind::Exp, x)
    }

    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log requires strictly positive input".into()));
        }
        Ok(self.unary_infallible(UnKind::Log, x))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Tensor {
        self.unary_infallible(UnKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Tensor {
        self.unary_infallible(UnKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: &Tensor) -> Tensor {
        self.unary_infallible(UnKind::Softplus, x)
    }

    pub fn leaky_relu(&mut self, x: &Tensor, slope: f64) -> Tensor {
        self.unary_infallible(UnKind::LeakyRelu(slope), x)
    }

    pub fn square(&mut self, x: &Tensor) -> Tensor {
        self.unary_infallible(UnKind::Square, x)
    }

    pub fn sqrt(&mut self, x: &Tensor) -> Result<Tensor> {
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt requires non-negative input".into()));
        }
        Ok(self.unary_infallible(UnKind::Sqrt, x))
    }

    pub fn scale(&mut self, x: &Tensor, c: f64) -> Tensor {
        self.unary_infallible(UnKind::Scale(c), x)
    }

    pub fn shift(&mut self, x: &Tensor, c: f64) -> Tensor {
        self.unary_infallible(UnKind::Shift(c), x)
    }

    pub fn clamp(&mut self, x: &Tensor, lo: f64, hi: f64) -> Tensor {
        self.unary_infallible(UnKind::Clamp(lo, hi), x)
    }

    fn unary_infallible(&mut self, kind: UnKind, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| unary_eval(kind, v)).collect();
        let out = TensorValue::new(x.shape().to_vec(), data);
        self.emit(
            x.node.is_some(),
            Op::Unary {
                kind,
                x: Input::of(x),
            },
            out,
        )
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = a.value.dims2()?;
        let (kb, n) = b.value.dims2()?;
        if ka != kb {
            return Err(Error::Dimension(format!(
                "matmul inner extents differ: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_kernel(a.data(), b.data(), &mut out, m, ka, n);
        let out = TensorValue::new(vec![m, n], out);
        let tracked = a.node.is_some() || b.node.is_some();
        Ok(self.emit(
            tracked,
            Op::Matmul {
                a: Input::of(a),
                b: Input::of(b),
            },
            out,
        ))
    }

    pub fn transpose(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.value.dims2()?;
        let out = transpose_data(x.data(), r, c);
        Ok(self.emit(
            x.node.is_some(),
            Op::Transpose { x: Input::of(x) },
            TensorValue::new(vec![c, r], out),
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Reduce along `axis` (keeping it as extent 1), or over all elements
    /// when `axis` is `None` (producing shape `[1]`).
    pub fn reduce(&mut self, kind: RedKind, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        let out = reduce_forward(kind, &x.value, axis)?;
        Ok(self.emit(
            x.node.is_some(),
            Op::Reduce {
                kind,
                x: Input::of(x),
                axis,
            },
            out,
        ))
    }

    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.reduce(RedKind::Sum, x, None)
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Result<Tensor> {
        self.reduce(RedKind::Mean, x, None)
    }

    pub fn logsumexp(&mut self, x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
        self.reduce(RedKind::LogSumExp, x, axis)
    }

    // ── structural ops ──────────────────────────────────────────────────

    /// Normalize every row of a rank-2 tensor to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        const EPS: f64 = 1e-12;
        let (r, c) = x.value.dims2()?;
        let mut out = vec![0.0; r * c];
        let mut norms = vec![0.0; r];
        for i in 0..r {
            let row = &x.data()[i * c..(i + 1) * c];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= EPS {
                return Err(Error::Degenerate(format!(
                    "row {i} has near-zero norm {norm:e}"
                )));
            }
            norms[i] = norm;
            for j in 0..c {
                out[i * c + j] = row[j] / norm;
            }
        }
        Ok(self.emit(
            x.node.is_some(),
            Op::L2NormalizeRows {
                x: Input::of(x),
                norms,
            },
            TensorValue::new(vec![r, c], out),
        ))
    }

    /// Concatenate rank-2 tensors along columns.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero tensors".into()));
        }
        let (rows, _) = parts[0].value.dims2()?;
        let mut total = 0usize;
        for p in parts {
            let (r, c) = p.value.dims2()?;
            if r != rows {
                return Err(Error::Dimension("concat row mismatch".into()));
            }
            total += c;
        }
        let mut out = vec![0.0; rows * total];
        let mut offset = 0usize;
        for p in parts {
            let (_, c) = p.value.dims2()?;
            for i in 0..rows {
                out[i * total + offset..i * total + offset + c].copy_from_slice(p.value.row(i));
            }
            offset += c;
        }
        let tracked = parts.iter().any(|p| p.node.is_some());
        Ok(self.emit(
            tracked,
            Op::ConcatCols {
                parts: parts.iter().map(|p| Input::of(p)).collect(),
            },
            TensorValue::new(vec![rows, total], out),
        ))
    }

    /// Columns `[start, start+len)` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (r, c) = x.value.dims2()?;
        if start + len > c {
            return Err(Error::Dimension(format!(
                "slice [{start}, {}) out of {c} columns",
                start + len
            )));
        }
        let mut out = vec![0.0; r * len];
        for i in 0..r {
            out[i * len..(i + 1) * len]
                .copy_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        Ok(self.emit(
            x.node.is_some(),
            Op::SliceCols {
                x: Input::of(x),
                start,
                len,
            },
            TensorValue::new(vec![r, len], out),
        ))
    }

    /// Main diagonal of a square matrix as a column vector.
    pub fn take_diag(&mut self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.value.dims2()?;
        if r != c {
            return Err(Error::Dimension(format!("diag of non-square {r}x{c}")));
        }
        let out: Vec<f64> = (0..r).map(|i| x.value.at2(i, i)).collect();
        Ok(self.emit(
            x.node.is_some(),
            Op::TakeDiag { x: Input::of(x) },
            TensorValue::new(vec![r, 1], out),
        ))
    }

    /// Straight-through hard gate. Forward: 1 when the relaxed gate
    /// sigmoid((logits + noise)/temperature) exceeds 1/2, else 0.
    /// Backward: derivative of the relaxed gate w.r.t. the logits.
    pub fn gate_straight_through(
        &mut self,
        logits: &Tensor,
        noise: &TensorValue,
        temperature: f64,
    ) -> Result<Tensor> {
        if logits.shape() != noise.shape() {
            return Err(Error::Dimension("gate noise shape mismatch".into()));
        }
        if temperature <= 0.0 {
            return Err(Error::Config("gate temperature must be > 0".into()));
        }
        let relaxed: Vec<f64> = logits
            .data()
            .iter()
            .zip(noise.data())
            .map(|(&l, &g)| sigmoid((l + g) / temperature))
            .collect();
        let hard: Vec<f64> = relaxed.iter().map(|&p| if p > 0.5 { 1.0 } else { 0.0 }).collect();
        let out = TensorValue::new(logits.shape().to_vec(), hard);
        Ok(self.emit(
            logits.node.is_some(),
            Op::GateSt {
                logits: Input::of(logits),
                relaxed,
                temperature,
            },
            out,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a one-element root. Visits each node exactly once
    /// in reverse append order; adjoints accumulate additively on fan-out.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_id = root
            .node
            .ok_or_else(|| Error::Numeric("backward root is not tracked on this tape".into()))?;
        if root.value.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward root must have a single element, got shape {:?}",
                root.shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            self.propagate(node, &grad, &mut grads)?;
            grads[id] = Some(grad);
        }

        let shapes = self.nodes.iter().map(|n| n.out.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, grad: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = node.out.shape();
                if let Some(id) = a.id {
                    let contrib = binary_adjoint_lhs(*kind, &a.value, &b.value, out_shape, grad);
                    accumulate(grads, id, &contrib, out_shape, a.value.shape());
                }
                if let Some(id) = b.id {
                    let contrib = binary_adjoint_rhs(*kind, &a.value, &b.value, out_shape, grad);
                    accumulate(grads, id, &contrib, out_shape, b.value.shape());
                }
            }
            Op::Unary { kind, x } => {
                if let Some(id) = x.id {
                    let contrib: Vec<f64> = x
                        .value
                        .data()
                        .iter()
                        .zip(node.out.data())
                        .zip(grad)
                        .map(|((&xi, &yi), &g)| g * unary_derivative(*kind, xi, yi))
                        .collect();
                    add_into(grads, id, x.value.len(), &contrib);
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = a.value.dims2()?;
                let (_, n) = b.value.dims2()?;
                if let Some(id) = a.id {
                    // dA = dC · Bᵀ
                    let bt = transpose_data(b.value.data(), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_kernel(grad, &bt, &mut da, m, n, k);
                    add_into(grads, id, m * k, &da);
                }
                if let Some(id) = b.id {
                    // dB = Aᵀ · dC
                    let at = transpose_data(a.value.data(), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_kernel(&at, grad, &mut db, k, m, n);
                    add_into(grads, id, k * n, &db);
                }
            }
            Op::Transpose { x } => {
                if let Some(id) = x.id {
                    let (r, c) = x.value.dims2()?;
                    let contrib = transpose_data(grad, c, r);
                    add_into(grads, id, r * c, &contrib);
                }
            }
            Op::Reduce { kind, x, axis } => {
                if let Some(id) = x.id {
                    let contrib = reduce_backward(*kind, &x.value, &node.out, *axis, grad);
                    add_into(grads, id, x.value.len(), &contrib);
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if let Some(id) = x.id {
                    let (r, c) = x.value.dims2()?;
                    let y = node.out.data();
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        let yi = &y[i * c..(i + 1) * c];
                        let gi = &grad[i * c..(i + 1) * c];
                        let dot: f64 = yi.iter().zip(gi).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            contrib[i * c + j] = (gi[j] - dot * yi[j]) / norms[i];
                        }
                    }
                    add_into(grads, id, r * c, &contrib);
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.out.shape()[1];
                let rows = node.out.shape()[0];
                let mut offset = 0usize;
                for p in parts {
                    let c = p.value.shape()[1];
                    if let Some(id) = p.id {
                        let mut contrib = vec![0.0; rows * c];
                        for i in 0..rows {
                            contrib[i * c..(i + 1) * c]
                                .copy_from_slice(&grad[i * total + offset..i * total + offset + c]);
                        }
                        add_into(grads, id, rows * c, &contrib);
                    }
                    offset += c;
                }
            }
            Op::SliceCols { x, start, len } => {
                if let Some(id) = x.id {
                    let (r, c) = x.value.dims2()?;
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        contrib[i * c + start..i * c + start + len]
                            .copy_from_slice(&grad[i * len..(i + 1) * len]);
                    }
                    add_into(grads, id, r * c, &contrib);
                }
            }
            Op::TakeDiag { x } => {
                if let Some(id) = x.id {
                    let (r, c) = x.value.dims2()?;
                    let mut contrib = vec![0.0; r * c];
                    for i in 0..r {
                        contrib[i * c + i] = grad[i];
                    }
                    add_into(grads, id, r * c, &contrib);
                }
            }
            Op::GateSt {
                logits,
                relaxed,
                temperature,
            } => {
                if let Some(id) = logits.id {
                    let contrib: Vec<f64> = relaxed
                        .iter()
                        .zip(grad)
                        .map(|(&p, &g)| g * p * (1.0 - p) / temperature)
                        .collect();
                    add_into(grads, id, logits.value.len(), &contrib);
                }
            }
        }
        Ok(())
    }
}

// ── kernels and helpers ─────────────────────────────────────────────────

/// Row-major C[m,n] = A[m,k] · B[k,n]. The j-loop is elementwise over the
/// output row, which keeps IEEE evaluation order fixed and vectorizes.
pub fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                crow[j] += aik * brow[j];
            }
        }
    }
}

pub fn transpose_data(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// softplus via the stable branch max(x, 0) + log(1 + e^{-|x|}).
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_eval(kind: UnKind, x: f64) -> f64 {
    match kind {
        UnKind::Neg => -x,
        UnKind::Exp => x.exp(),
        UnKind::Log => x.ln(),
        UnKind::Tanh => x.tanh(),
        UnKind::Sigmoid => sigmoid(x),
        UnKind::Softplus => softplus(x),
        UnKind::LeakyRelu(slope) => {
            if x >= 0.0 {
                x
            } else {
                slope * x
            }
        }
        UnKind::Square => x * x,
        UnKind::Sqrt => x.sqrt(),
        UnKind::Scale(c) => c * x,
        UnKind::Shift(c) => x + c,
        UnKind::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

/// d out / d x given input x and output y = f(x).
fn unary_derivative(kind: UnKind, x: f64, y: f64) -> f64 {
    match kind {
        UnKind::Neg => -1.0,
        UnKind::Exp => y,
        UnKind::Log => 1.0 / x,
        UnKind::Tanh => 1.0 - y * y,
        UnKind::Sigmoid => y * (1.0 - y),
        UnKind::Softplus => sigmoid(x),
        UnKind::LeakyRelu(slope) => {
            if x >= 0.0 {
                1.0
            } else {
                slope
            }
        }
        UnKind::Square => 2.0 * x,
        UnKind::Sqrt => 0.5 / y,
        UnKind::Scale(c) => c,
        UnKind::Shift(_) => 1.0,
        UnKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn bin_eval(kind: BinKind, a: f64, b: f64) -> f64 {
    match kind {
        BinKind::Add => a + b,
        BinKind::Sub => a - b,
        BinKind::Mul => a * b,
        BinKind::Div => a / b,
    }
}

fn binary_forward(kind: BinKind, a: &TensorValue, b: &TensorValue) -> Result<TensorValue> {
    // Fast path: identical shapes.
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| bin_eval(kind, x, y))
            .collect();
        return Ok(TensorValue::new(a.shape().to_vec(), data));
    }
    // Scalar on either side (rank must not exceed the other operand's).
    if b.len() == 1 && b.rank() <= a.rank() {
        let y = b.data()[0];
        let data = a.data().iter().map(|&x| bin_eval(kind, x, y)).collect();
        return Ok(TensorValue::new(a.shape().to_vec(), data));
    }
    if a.len() == 1 && a.rank() <= b.rank() {
        let x = a.data()[0];
        let data = b.data().iter().map(|&y| bin_eval(kind, x, y)).collect();
        return Ok(TensorValue::new(b.shape().to_vec(), data));
    }
    let out_shape = broadcast_shapes(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let total: usize = out_shape.iter().product();
    let mut data = vec![0.0; total];
    let mut idx = vec![0usize; out_shape.len()];
    let (ad, bd) = (a.data(), b.data());
    let mut ia = 0usize;
    let mut ib = 0usize;
    for slot in data.iter_mut() {
        *slot = bin_eval(kind, ad[ia], bd[ib]);
        // Advance the multi-index (row-major).
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    Ok(TensorValue::new(out_shape, data))
}

/// Per-output-element adjoint for the left operand (pre-reduction).
fn binary_adjoint_lhs(
    kind: BinKind,
    _a: &TensorValue,
    b: &TensorValue,
    out_shape: &[usize],
    grad: &[f64],
) -> Vec<f64> {
    match kind {
        BinKind::Add | BinKind::Sub => grad.to_vec(),
        BinKind::Mul => broadcast_map(b, out_shape, grad, |bv, g| g * bv),
        BinKind::Div => broadcast_map(b, out_shape, grad, |bv, g| g / bv),
    }
}

/// Evaluate f(src_broadcast, grad) elementwise over the output extent.
fn broadcast_map(
    src: &TensorValue,
    out_shape: &[usize],
    grad: &[f64],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if src.shape() == out_shape {
        return src.data().iter().zip(grad).map(|(&s, &g)| f(s, g)).collect();
    }
    let strides = broadcast_strides(src.shape(), out_shape);
    let mut idx = vec![0usize; out_shape.len()];
    let mut is = 0usize;
    let data = src.data();
    let mut out = Vec::with_capacity(grad.len());
    for &g in grad {
        out.push(f(data[is], g));
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            is += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            is -= strides[d] * out_shape[d];
        }
    }
    out
}

/// Per-output-element adjoint for the right operand (pre-reduction).
fn binary_adjoint_rhs(
    kind: BinKind,
    a: &TensorValue,
    b: &TensorValue,
    out_shape: &[usize],
    grad: &[f64],
) -> Vec<f64> {
    match kind {
        BinKind::Add => grad.to_vec(),
        BinKind::Sub => grad.iter().map(|g| -g).collect(),
        BinKind::Mul => broadcast_map(a, out_shape, grad, |av, g| g * av),
        BinKind::Div => {
            // d(a/b)/db = -a / b²
            let sa = broadcast_strides(a.shape(), out_shape);
            let sb = broadcast_strides(b.shape(), out_shape);
            let mut idx = vec![0usize; out_shape.len()];
            let (mut ia, mut ib) = (0usize, 0usize);
            let (ad, bd) = (a.data(), b.data());
            let mut out = Vec::with_capacity(grad.len());
            for &g in grad {
                out.push(-g * ad[ia] / (bd[ib] * bd[ib]));
                for d in (0..out_shape.len()).rev() {
                    idx[d] += 1;
                    ia += sa[d];
                    ib += sb[d];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    idx[d] = 0;
                    ia -= sa[d] * out_shape[d];
                    ib -= sb[d] * out_shape[d];
                }
            }
            out
        }
    }
}

/// Add a contribution computed at `out_shape` into the gradient buffer of
/// node `id`, summing over broadcast dimensions to reach `target_shape`.
fn accumulate(
    grads: &mut [Option<Vec<f64>>],
    id: NodeId,
    contrib: &[f64],
    out_shape: &[usize],
    target_shape: &[usize],
) {
    let target_len: usize = target_shape.iter().product();
    if out_shape.iter().product::<usize>() == target_len && contrib.len() == target_len {
        add_into(grads, id, target_len, contrib);
        return;
    }
    let reduced = reduce_to_shape(contrib, out_shape, target_shape);
    add_into(grads, id, target_len, &reduced);
}

fn add_into(grads: &mut [Option<Vec<f64>>], id: NodeId, len: usize, contrib: &[f64]) {
    let buf = grads[id].get_or_insert_with(|| vec![0.0; len]);
    debug_assert_eq!(buf.len(), contrib.len());
    for (g, c) in buf.iter_mut().zip(contrib) {
        *g += c;
    }
}

/// Sum `data` (laid out as `from_shape`) over the dimensions that were
/// broadcast relative to `to_shape`.
pub fn reduce_to_shape(data: &[f64], from_shape: &[usize], to_shape: &[usize]) -> Vec<f64> {
    let target_len: usize = to_shape.iter().product();
    let strides = broadcast_strides(to_shape, from_shape);
    let mut out = vec![0.0; target_len];
    let mut idx = vec![0usize; from_shape.len()];
    let mut it = 0usize;
    for &v in data {
        out[it] += v;
        for d in (0..from_shape.len()).rev() {
            idx[d] += 1;
            it += strides[d];
            if idx[d] < from_shape[d] {
                break;
            }
            idx[d] = 0;
            it -= strides[d] * from_shape[d];
        }
    }
    out
}

fn reduce_forward(kind: RedKind, x: &TensorValue, axis: Option<usize>) -> Result<TensorValue> {
    match axis {
        None => {
            if x.is_empty() {
                return Err(Error::Dimension("reduction over empty tensor".into()));
            }
            let v = match kind {
                RedKind::Sum => x.data().iter().sum(),
                RedKind::Mean => x.data().iter().sum::<f64>() / x.len() as f64,
                RedKind::Max => fold_max(x.data()),
                RedKind::LogSumExp => logsumexp_slice(x.data()),
            };
            Ok(TensorValue::scalar(v))
        }
        Some(axis) => {
            let (r, c) = x.value_dims_for_axis(axis)?;
            let (groups, extent, out_shape) = if axis == 0 {
                (c, r, vec![1, c])
            } else {
                (r, c, vec![r, 1])
            };
            if extent == 0 {
                return Err(Error::Dimension("reduction over empty axis".into()));
            }
            let mut out = vec![0.0; groups];
            for (g, slot) in out.iter_mut().enumerate() {
                let series = AxisIter::new(x.data(), r, c, axis, g);
                *slot = match kind {
                    RedKind::Sum => series.sum(),
                    RedKind::Mean => series.sum::<f64>() / extent as f64,
                    RedKind::Max => {
                        let vals: Vec<f64> = series.collect();
                        fold_max(&vals)
                    }
                    RedKind::LogSumExp => {
                        let vals: Vec<f64> = series.collect();
                        logsumexp_slice(&vals)
                    }
                };
            }
            Ok(TensorValue::new(out_shape, out))
        }
    }
}

impl TensorValue {
    fn value_dims_for_axis(&self, axis: usize) -> Result<(usize, usize)> {
        match (self.shape(), axis) {
            ([r, c], 0 | 1) => Ok((*r, *c)),
            ([n], 0) => Ok((*n, 1)),
            (s, a) => Err(Error::Dimension(format!(
                "axis {a} invalid for shape {s:?}"
            ))),
        }
    }
}

struct AxisIter<'a> {
    data: &'a [f64],
    stride: usize,
    pos: usize,
    remaining: usize,
}

impl<'a> AxisIter<'a> {
    /// Iterate the `group`-th series along `axis` of an r x c matrix.
    fn new(data: &'a [f64], r: usize, c: usize, axis: usize, group: usize) -> Self {
        if axis == 0 {
            AxisIter {
                data,
                stride: c,
                pos: group,
                remaining: r,
            }
        } else {
            AxisIter {
                data,
                stride: 1,
                pos: group * c,
                remaining: c,
            }
        }
    }
}

impl<'a> Iterator for AxisIter<'a> {
    type Item = f64;
    fn next(&mut self) -> Option<f64> {
        if self.remaining == 0 {
            return None;
        }
        let v = self.data[self.pos];
        self.pos += self.stride;
        self.remaining -= 1;
        Some(v)
    }
}

/// Max with ties broken by first occurrence.
fn fold_max(xs: &[f64]) -> f64 {
    let mut best = xs[0];
    for &x in &xs[1..] {
        if x > best {
            best = x;
        }
    }
    best
}

fn first_argmax(xs: impl Iterator<Item = f64>) -> usize {
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0usize;
    for (i, x) in xs.enumerate() {
        if x > best {
            best = x;
            arg = i;
        }
    }
    arg
}

/// Max-shifted log-sum-exp.
fn logsumexp_slice(xs: &[f64]) -> f64 {
    let m = fold_max(xs);
    if m.is_infinite() && m < 0.0 {
        return f64::NEG_INFINITY;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

fn reduce_backward(
    kind: RedKind,
    x: &TensorValue,
    out: &TensorValue,
    axis: Option<usize>,
    grad: &[f64],
) -> Vec<f64> {
    let n = x.len();
    match axis {
        None => {
            let g = grad[0];
            match kind {
                RedKind::Sum => vec![g; n],
                RedKind::Mean => vec![g / n as f64; n],
                RedKind::Max => {
                    let mut out_grad = vec![0.0; n];
                    let arg = first_argmax(x.data().iter().copied());
                    out_grad[arg] = g;
                    out_grad
                }
                RedKind::LogSumExp => {
                    let lse = out.data()[0];
                    x.data().iter().map(|&v| g * (v - lse).exp()).collect()
                }
            }
        }
        Some(axis) => {
            let (r, c) = x.value_dims_for_axis(axis).expect("checked in forward");
            let groups = if axis == 0 { c } else { r };
            let extent = if axis == 0 { r } else { c };
            let mut out_grad = vec![0.0; n];
            for g_idx in 0..groups {
                let g = grad[g_idx];
                let write = |out_grad: &mut [f64], along: usize, v: f64| {
                    let pos = if axis == 0 {
                        along * c + g_idx
                    } else {
                        g_idx * c + along
                    };
                    out_grad[pos] += v;
                };
                match kind {
                    RedKind::Sum => {
                        for t in 0..extent {
                            write(&mut out_grad, t, g);
                        }
                    }
                    RedKind::Mean => {
                        for t in 0..extent {
                            write(&mut out_grad, t, g / extent as f64);
                        }
                    }
                    RedKind::Max => {
                        let arg = first_argmax(AxisIter::new(x.data(), r, c, axis, g_idx));
                        write(&mut out_grad, arg, g);
                    }
                    RedKind::LogSumExp => {
                        let lse = out.data()[g_idx];
                        for (t, v) in AxisIter::new(x.data(), r, c, axis, g_idx).enumerate() {
                            write(&mut out_grad, t, g * (v - lse).exp());
                        }
                    }
                }
            }
            out_grad
        }
    }
}
