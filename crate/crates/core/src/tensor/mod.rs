//! Dense `f32` tensors and a tape-based reverse-mode differentiation graph.
//!
//! A [`Graph`] is rebuilt for every training step. Leaves are registered with
//! [`Graph::param`] (differentiable) or [`Graph::constant`]; every op appends a
//! node whose inputs precede it, so insertion order is a valid topological
//! order and [`Graph::backward`] is a single reverse sweep.

mod ops;
mod optim;

use std::sync::Arc;

pub use optim::{adam_step, AdamConfig, AdamState};

use crate::error::{Error, Result};

/// Fill value used by [`Graph::masked_fill`] in place of negative infinity.
pub const MASK_FILL: f32 = -1e9;

/// Row-major dense array of `f32`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} holds {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        let data = rows.iter().flatten().copied().collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element at a 2-D index.
    pub fn at(&self, row: usize, col: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f32] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[row * cols..(row + 1) * cols]
    }

    /// The value of a single-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f32>,
        count: usize,
    },
    Mse(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Reshape(Var),
    Transpose(Var),
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Sum(Var),
    Mean(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a differentiable leaf. The tensor is shared, not copied.
    pub fn param(&mut self, value: Arc<Tensor>) -> Var {
        self.push_leaf(value, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(Arc::new(value), false)
    }

    fn push_leaf(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// Reverse sweep from a scalar loss. Gradients are added to whatever
    /// each node already holds, so two calls without [`Graph::zero_grad`]
    /// accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let value = &self.nodes[loss.0].value;
        if value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                value.shape
            )));
        }
        if !value.data[0].is_finite() {
            return Err(Error::NonFinite(format!("loss = {}", value.data[0])));
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.backprop_node(id, &g, &mut grads);
            }
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, contrib: Vec<f32>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape[0], av.shape[1], bv.shape[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv.data[p * n..(p + 1) * n];
                            da[i * k + p] = dot(grow, brow);
                        }
                    }
                    send(*a, da);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = av.data[i * k + p];
                            if aip != 0.0 {
                                axpy(aip, grow, &mut db[p * n..(p + 1) * n]);
                            }
                        }
                    }
                    send(*b, db);
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddBias(x, b) => {
                send(*x, g.to_vec());
                let n = self.value(*b).numel();
                let mut db = vec![0.0; n];
                for chunk in g.chunks(n) {
                    db.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                }
                send(*b, db);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                send(*a, g.iter().zip(&bv.data).map(|(g, b)| g * b).collect());
                send(*b, g.iter().zip(&av.data).map(|(g, a)| g * a).collect());
            }
            Op::Scale(x, c) => send(*x, g.iter().map(|g| g * c).collect()),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                send(
                    *x,
                    g.iter()
                        .zip(&xv.data)
                        .map(|(g, &x)| g * ops::gelu_grad(x))
                        .collect(),
                );
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = &out.data;
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let s: f32 = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            dx[idx(j)] = y[idx(j)] * (g[idx(j)] - s);
                        }
                    }
                }
                send(*x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain);
                let d = gv.numel();
                let rows = xhat.len() / d;
                let mut dx = vec![0.0; xhat.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xr[j];
                        dgain[j] += gr[j] * xr[j];
                        dbias[j] += gr[j];
                    }
                    mean_dxhat /= d as f32;
                    mean_dxhat_xhat /= d as f32;
                    for j in 0..d {
                        let dxh = gr[j] * gv.data[j];
                        dx[r * d + j] = rstd[r] * (dxh - mean_dxhat - xr[j] * mean_dxhat_xhat);
                    }
                }
                send(*x, dx);
                send(*gain, dgain);
                send(*bias, dbias);
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
                probs,
                count,
            } => {
                let c = self.value(*logits).shape[1];
                let mut dx = vec![0.0; probs.len()];
                if *count > 0 {
                    let scale = g[0] / *count as f32;
                    for (r, &label) in labels.iter().enumerate() {
                        if label == *ignore_index {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dx[r * c + j] = scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
                send(*logits, dx);
            }
            Op::Mse(pred, target) => {
                let (pv, tv) = (self.value(*pred), self.value(*target));
                let scale = 2.0 * g[0] / pv.numel() as f32;
                let d: Vec<f32> = pv
                    .data
                    .iter()
                    .zip(&tv.data)
                    .map(|(p, t)| scale * (p - t))
                    .collect();
                send(*target, d.iter().map(|v| -v).collect());
                send(*pred, d);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.shape[1];
                let mut dt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                send(*table, dt);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Transpose(x) => {
                let (r, c) = (out.shape[0], out.shape[1]);
                // out is r×c, input is c×r
                let mut dx = vec![0.0; g.len()];
                for i in 0..r {
                    for j in 0..c {
                        dx[j * r + i] = g[i * c + j];
                    }
                }
                send(*x, dx);
            }
            Op::MaskedFill { x, mask } => send(
                *x,
                g.iter()
                    .zip(mask)
                    .map(|(&g, &m)| if m { 0.0 } else { g })
                    .collect(),
            ),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, vec![g[0] / n as f32; n]);
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (rows, cols) = (xv.shape[0], xv.shape[1]);
                let len = out.shape[1];
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                send(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape[0];
                let total = out.shape[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape[1];
                    let mut dp = vec![0.0; rows * w];
                    for r in 0..rows {
                        dp[r * w..(r + 1) * w]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    send(*p, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    send(*p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SelectRows { x, rows } => {
                let xv = self.value(*x);
                let cols = xv.shape[1];
                let mut dx = vec![0.0; xv.numel()];
                for (i, &r) in rows.iter().enumerate() {
                    dx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(&g[i * cols..(i + 1) * cols])
                        .for_each(|(a, b)| *a += b);
                }
                send(*x, dx);
            }
            Op::Dropout { x, mask } => {
                send(*x, g.iter().zip(mask).map(|(g, m)| g * m).collect());
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => {
            vec![*a, *b]
        }
        Op::Scale(x, _)
        | Op::Gelu(x)
        | Op::Reshape(x)
        | Op::Transpose(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::Softmax { x, .. }
        | Op::MaskedFill { x, .. }
        | Op::SliceCols { x, .. }
        | Op::SelectRows { x, .. }
        | Op::Dropout { x, .. } => vec![*x],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::Embedding { table, .. } => vec![*table],
        Op::ConcatCols(parts) | Op::ConcatRows(parts) => parts.clone(),
    }
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

/// Returns an error naming the first non-finite entry, if any.
pub fn check_finite(name: &str, t: &Tensor) -> Result<()> {
    match t.data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::NonFinite(format!("{name}[{i}] = {}", t.data[i]))),
    }
}
