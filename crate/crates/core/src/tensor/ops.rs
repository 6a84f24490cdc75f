use rand::Rng;

use super::{axpy, Graph, Op, Tensor, Var, MASK_FILL};
use crate::error::{Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

pub(crate) fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_K * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl Graph {
    fn require_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(shape_err(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_2d("matmul", a)?;
        let (k2, n) = self.require_2d("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = av.data[i * k + p];
                if aip != 0.0 {
                    axpy(aip, &bv.data[p * n..(p + 1) * n], orow);
                }
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push(t, Op::Add(a, b)))
    }

    /// `x + bias` where `bias` is 1-D and matches the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = match self.shape(bias) {
            [n] => *n,
            s => return Err(shape_err("add_bias", self.shape(x), s)),
        };
        if self.shape(x).last() != Some(&n) {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let (xv, bv) = (self.value(x), self.value(bias));
        let mut data = xv.data.clone();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(&bv.data).for_each(|(a, b)| *a += b);
        }
        let t = Tensor::new(xv.shape.clone(), data)?;
        Ok(self.push(t, Op::AddBias(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(av.shape.clone(), data)?;
        Ok(self.push(t, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|v| v * c).collect(),
        };
        self.push(t, Op::Scale(x, c))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().map(|&v| gelu(v)).collect(),
        };
        self.push(t, Op::Gelu(x))
    }

    /// Max-stabilised softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(shape_err("softmax", &shape, &[axis]));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = &self.value(x).data;
        let mut y = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| xv[idx(j)]).fold(f32::NEG_INFINITY, f32::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (xv[idx(j)] - max).exp();
                    y[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    y[idx(j)] /= total;
                }
            }
        }
        let t = Tensor::new(shape, y)?;
        Ok(self.push(
            t,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalises over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 || self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let (gv, bv) = (&self.value(gain).data, &self.value(bias).data);
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut y = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(xv.shape.clone(), y)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood over rows whose label is not `ignore_index`.
    /// When every row is ignored the loss is 0 with a zero gradient.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let (b, c) = self.require_2d("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(shape_err("cross_entropy", self.shape(logits), &[labels.len()]));
        }
        if let Some(bad) = labels.iter().find(|&&l| l != ignore_index && l >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let lv = &self.value(logits).data;
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0f64;
        let mut count = 0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let sum: f32 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            if label != ignore_index {
                total += f64::from(lse - row[label]);
                count += 1;
            }
        }
        let loss = if count > 0 {
            (total / count as f64) as f32
        } else {
            0.0
        };
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_index,
                probs,
                count,
            },
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        if self.shape(pred) != self.shape(target) || self.value(pred).numel() == 0 {
            return Err(shape_err("mse", self.shape(pred), self.shape(target)));
        }
        let (pv, tv) = (self.value(pred), self.value(target));
        let sum: f64 = pv
            .data
            .iter()
            .zip(&tv.data)
            .map(|(p, t)| f64::from(p - t).powi(2))
            .sum();
        let loss = (sum / pv.numel() as f64) as f32;
        Ok(self.push(Tensor::scalar(loss), Op::Mse(pred, target)))
    }

    /// Gathers rows of `table` (shape `[vocab, d]`); the gradient scatters back.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.require_2d("embedding", table)?;
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::contract(format!("id {bad} out of range for table of {v} rows")));
        }
        let tv = &self.value(table).data;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if shape.iter().product::<usize>() != xv.numel() {
            return Err(shape_err("reshape", &xv.shape, &shape));
        }
        let t = Tensor::new(shape, xv.data.clone())?;
        Ok(self.push(t, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.require_2d("transpose", x)?;
        let xv = &self.value(x).data;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        Ok(self.push(t, Op::Transpose(x)))
    }

    /// Replaces entries where `mask` is true with [`MASK_FILL`].
    pub fn masked_fill(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err("masked_fill", &xv.shape, &[mask.len()]));
        }
        let data = xv
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { MASK_FILL } else { v })
            .collect();
        let t = Tensor::new(xv.shape.clone(), data)?;
        Ok(self.push(
            t,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().sum::<f32>() / xv.numel().max(1) as f32;
        self.push(Tensor::scalar(m), Op::Mean(x))
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (rows, cols) = self.require_2d("slice_cols", x)?;
        if start + len > cols {
            return Err(shape_err("slice_cols", &[rows, cols], &[start, len]));
        }
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xv[r * cols + start..r * cols + start + len]);
        }
        let t = Tensor::new(vec![rows, len], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.require_2d("concat_cols", parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_2d("concat_cols", p)?;
            if r != rows {
                return Err(shape_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks 2-D tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let cols = self.require_2d("concat_rows", parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.require_2d("concat_rows", p)?;
            if c != cols {
                return Err(shape_err("concat_rows", self.shape(parts[0]), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(&self.value(p).data);
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("stack of nothing"));
        }
        let inner = self.shape(parts[0]).to_vec();
        let mut out = Vec::new();
        for &p in parts {
            if self.shape(p) != inner.as_slice() {
                return Err(shape_err("stack", &inner, self.shape(p)));
            }
            out.extend_from_slice(&self.value(p).data);
        }
        let mut shape = vec![parts.len()];
        shape.extend(inner);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec())))
    }

    /// Gathers the listed rows of a 2-D tensor.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.require_2d("select_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(shape_err("select_rows", &[n, cols], &[bad]));
        }
        let xv = &self.value(x).data;
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let t = Tensor::new(vec![rows.len(), cols], out)?;
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Inverted dropout: kept entries are scaled by `1 / (1 - rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f32, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let mask: Vec<f32> = (0..xv.numel())
            .map(|_| {
                if rng.random::<f32>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let t = Tensor {
            shape: xv.shape.clone(),
            data: xv.data.iter().zip(&mask).map(|(v, m)| v * m).collect(),
        };
        self.push(t, Op::Dropout { x, mask })
    }
}
