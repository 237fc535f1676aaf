use std::sync::Arc;

use super::kernels::{self, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, sigmoid};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which keys each query row of an attention call may see.
#[derive(Clone, Debug)]
pub enum AttnMask {
    /// Query `i` sees keys `0..=offset + i`.
    Causal { offset: usize },
    /// Row-major `[queries x keys]` visibility flags.
    Explicit { keys: usize, allowed: Arc<Vec<bool>> },
}

impl AttnMask {
    /// Visible key indices for query `i`, in increasing order.
    pub fn visible(&self, i: usize, sk: usize) -> Vec<usize> {
        match self {
            AttnMask::Causal { offset } => (0..(offset + i + 1).min(sk)).collect(),
            AttnMask::Explicit { keys, allowed } => allowed[i * keys..(i + 1) * keys]
                .iter()
                .enumerate()
                .filter_map(|(r, &a)| a.then_some(r))
                .collect(),
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    Relu(Var),
    LogClamped { x: Var, floor: f64 },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    MaskedLogSoftmax { x: Var, allowed: Arc<Vec<bool>> },
    Rope { x: Var, positions: Arc<Vec<usize>>, heads: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, mask: AttnMask, heads: usize, probs: Vec<f64> },
    GatherRows { x: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    SmoothL1 { pred: Var, target: Var, beta: f64 },
    CrossEntropy { log_probs: Var, target: Var },
    NormalizeRows { x: Var, norms: Vec<f64> },
    SelectMean { x: Var, indices: Vec<usize> },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `like`'s shape when none reached it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

/// Ordered record of operations; the single-threaded autodiff substrate.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn as_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::InvalidParameter {
            op,
            msg: format!("expected a matrix, got shape {other:?}"),
        }),
    }
}

/// `(outer, axis_len, inner)` strides for reducing along `axis`.
fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidParameter {
            op,
            msg: format!("axis {axis} out of range for rank {}", shape.len()),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul", ta)?;
        let (k2, n) = as_matrix("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        check("matmul", &out)?;
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b)))
    }

    /// `a [m x k] * b[n x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul_nt", ta)?;
        let (n, k2) = as_matrix("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        check("matmul_nt", &out)?;
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMulNt(a, b)))
    }

    fn zip_with(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op_name, ta, tb));
        }
        let out: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        check(op_name, &out)?;
        let shape = ta.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|x| x * c).collect();
        check("scale", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a], Op::Scale(a, c)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| x * sigmoid(x)).collect();
        check("silu", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a], Op::Silu(a)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a], Op::Relu(a)))
    }

    /// `ln(max(x, floor))`; entries at or below `floor` carry no gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Result<Var> {
        if !(floor > 0.0) {
            return Err(TensorError::InvalidParameter {
                op: "log_clamped",
                msg: format!("floor must be positive, got {floor}"),
            });
        }
        let t = self.value(a);
        let out: Vec<f64> = t.data().iter().map(|&x| x.max(floor).ln()).collect();
        check("log_clamped", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a], Op::LogClamped { x: a, floor }))
    }

    /// Row-wise `x / rms(x) * gain` over the last axis.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(gain));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(mismatch("rms_norm", tx, tg));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidParameter {
                op: "rms_norm",
                msg: "eps must be positive".into(),
            });
        }
        let rows = tx.rows();
        let mut out = vec![0.0; tx.numel()];
        let mut inv_rms = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = tx.row(r);
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for (j, o) in out[r * d..(r + 1) * d].iter_mut().enumerate() {
                *o = xr[j] * inv * tg.data()[j];
            }
        }
        check("rms_norm", &out)?;
        let shape = tx.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x, gain],
            Op::RmsNorm { x, gain, inv_rms },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split("softmax", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; t.numel()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[base + j * inner];
                }
                for (j, p) in kernels::softmax_slice(&buf).into_iter().enumerate() {
                    out[base + j * inner] = p;
                }
            }
        }
        check("softmax", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::Softmax { x, axis }))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (outer, len, inner) = axis_split("log_softmax", t.shape(), axis)?;
        let src = t.data();
        let mut out = vec![0.0; t.numel()];
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = src[base + j * inner];
                }
                for (j, p) in kernels::log_softmax_slice(&buf).into_iter().enumerate() {
                    out[base + j * inner] = p;
                }
            }
        }
        check("log_softmax", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::LogSoftmax { x, axis }))
    }

    /// Row-wise log-softmax over the allowed entries of each row of a matrix.
    /// Disallowed entries are emitted as `0.0` and carry no gradient.
    pub fn masked_log_softmax(&mut self, x: Var, allowed: Arc<Vec<bool>>) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = as_matrix("masked_log_softmax", t)?;
        if allowed.len() != rows * cols {
            return Err(TensorError::InvalidParameter {
                op: "masked_log_softmax",
                msg: format!("mask has {} entries for a {rows}x{cols} input", allowed.len()),
            });
        }
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = t.row(r);
            let mr = &allowed[r * cols..(r + 1) * cols];
            let mut max = f64::NEG_INFINITY;
            for (v, &a) in xr.iter().zip(mr) {
                if a {
                    max = max.max(*v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Degenerate {
                    op: "masked_log_softmax",
                    msg: format!("row {r} has no allowed entries"),
                });
            }
            let mut sum = 0.0;
            for (v, &a) in xr.iter().zip(mr) {
                if a {
                    sum += (v - max).exp();
                }
            }
            let lse = max + sum.ln();
            for c in 0..cols {
                if mr[c] {
                    out[r * cols + c] = xr[c] - lse;
                }
            }
        }
        check("masked_log_softmax", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x],
            Op::MaskedLogSoftmax { x, allowed },
        ))
    }

    /// Rotary position embedding on a `[rows x heads*head_dim]` matrix.
    pub fn rope(&mut self, x: Var, positions: Arc<Vec<usize>>, heads: usize, base: f64) -> Result<Var> {
        let t = self.value(x);
        let (rows, width) = as_matrix("rope", t)?;
        if positions.len() != rows || heads == 0 || width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(TensorError::InvalidParameter {
                op: "rope",
                msg: format!("{rows} rows, width {width}, {heads} heads, {} positions", positions.len()),
            });
        }
        let mut out = t.to_vec();
        kernels::rope_in_place(&mut out, &positions, heads, width / heads, base, 1.0);
        check("rope", &out)?;
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            &[x],
            Op::Rope { x, positions, heads, base },
        ))
    }

    /// Multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: AttnMask, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, width) = as_matrix("attention", tq)?;
        let (sk, wk) = as_matrix("attention", tk)?;
        if wk != width || tv.shape() != tk.shape() {
            return Err(mismatch("attention", tq, tk));
        }
        if heads == 0 || width % heads != 0 {
            return Err(TensorError::InvalidParameter {
                op: "attention",
                msg: format!("width {width} not divisible by {heads} heads"),
            });
        }
        if let AttnMask::Explicit { keys, allowed } = &mask {
            if *keys != sk || allowed.len() != sq * sk {
                return Err(TensorError::InvalidParameter {
                    op: "attention",
                    msg: format!("mask is not {sq}x{sk}"),
                });
            }
        }
        for i in 0..sq {
            if mask.visible(i, sk).is_empty() {
                return Err(TensorError::Degenerate {
                    op: "attention",
                    msg: format!("query {i} sees no keys"),
                });
            }
        }
        let keep = self.requires_grad(q) || self.requires_grad(k) || self.requires_grad(v);
        let vis = |i: usize| mask.visible(i, sk);
        let (out, probs) = kernels::attention_forward(
            tq.data(),
            tk.data(),
            tv.data(),
            sq,
            sk,
            heads,
            width / heads,
            &vis,
            keep,
        );
        check("attention", &out)?;
        Ok(self.push(
            Tensor::from_parts(vec![sq, width], out),
            &[q, k, v],
            Op::Attention { q, k, v, mask, heads, probs },
        ))
    }

    /// Selects rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = as_matrix("gather_rows", t)?;
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        Ok(self.push(
            Tensor::from_parts(vec![indices.len(), cols], out),
            &[x],
            Op::GatherRows { x, indices: indices.to_vec() },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidParameter {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = as_matrix("concat_cols", self.value(*first))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = as_matrix("concat_cols", self.value(*p))?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(*first), self.value(*p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, total], out),
            parts,
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(TensorError::InvalidParameter {
            op: "concat_rows",
            msg: "no inputs".into(),
        })?;
        let cols = as_matrix("concat_rows", self.value(*first))?.1;
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, c) = as_matrix("concat_rows", self.value(*p))?;
            if c != cols {
                return Err(mismatch("concat_rows", self.value(*first), self.value(*p)));
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            parts,
            Op::ConcatRows(parts.to_vec()),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = as_matrix("slice_rows", t)?;
        if start > end || end > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: end,
                len: rows,
            });
        }
        let out = t.data()[start * cols..end * cols].to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![end - start, cols], out),
            &[x],
            Op::SliceRows { x, start },
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = as_matrix("slice_cols", t)?;
        if start > end || end > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, end - start], out),
            &[x],
            Op::SliceCols { x, start },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, &[x], Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        check("sum", &[s])?;
        Ok(self.push(Tensor::from_parts(vec![1], vec![s]), &[x], Op::Sum(x)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Degenerate {
                op: "mean",
                msg: "empty input".into(),
            });
        }
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        check("mean", &[s])?;
        Ok(self.push(Tensor::from_parts(vec![1], vec![s]), &[x], Op::Mean(x)))
    }

    /// Mean elementwise smooth-L1 (Huber with transition at `beta`).
    pub fn smooth_l1(&mut self, pred: Var, target: Var, beta: f64) -> Result<Var> {
        if beta <= 0.0 || !beta.is_finite() {
            return Err(TensorError::InvalidParameter {
                op: "smooth_l1",
                msg: format!("beta must be positive, got {beta}"),
            });
        }
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(mismatch("smooth_l1", tp, tt));
        }
        let n = tp.numel().max(1) as f64;
        let total: f64 = tp
            .data()
            .iter()
            .zip(tt.data())
            .map(|(p, t)| {
                let d = (p - t).abs();
                if d < beta {
                    0.5 * d * d / beta
                } else {
                    d - 0.5 * beta
                }
            })
            .sum();
        let v = total / n;
        check("smooth_l1", &[v])?;
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![v]),
            &[pred, target],
            Op::SmoothL1 { pred, target, beta },
        ))
    }

    /// Mean over rows of `-sum_c target * log_probs`; targets may be soft.
    pub fn cross_entropy(&mut self, log_probs: Var, target: Var) -> Result<Var> {
        let (tl, tt) = (self.value(log_probs), self.value(target));
        if tl.shape() != tt.shape() {
            return Err(mismatch("cross_entropy", tl, tt));
        }
        let rows = tl.rows().max(1) as f64;
        let total: f64 = -tl.data().iter().zip(tt.data()).map(|(l, q)| l * q).sum::<f64>();
        let v = total / rows;
        check("cross_entropy", &[v])?;
        Ok(self.push(
            Tensor::from_parts(vec![1], vec![v]),
            &[log_probs, target],
            Op::CrossEntropy { log_probs, target },
        ))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut out = vec![0.0; t.numel()];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let xr = t.row(r);
            let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) {
                return Err(TensorError::Degenerate {
                    op: "normalize_rows",
                    msg: format!("row {r} has zero norm"),
                });
            }
            norms.push(norm);
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = v / norm;
            }
        }
        check("normalize_rows", &out)?;
        let shape = t.shape().to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[x], Op::NormalizeRows { x, norms }))
    }

    /// Mean of the entries at the given flat indices (repeats allowed).
    pub fn select_mean(&mut self, x: Var, indices: Vec<usize>) -> Result<Var> {
        let t = self.value(x);
        if indices.is_empty() {
            return Err(TensorError::Degenerate {
                op: "select_mean",
                msg: "no indices".into(),
            });
        }
        let mut s = 0.0;
        for &i in &indices {
            s += *t.data().get(i).ok_or(TensorError::IndexOutOfRange {
                op: "select_mean",
                index: i,
                len: t.numel(),
            })?;
        }
        let v = s / indices.len() as f64;
        check("select_mean", &[v])?;
        Ok(self.push(Tensor::from_parts(vec![1], vec![v]), &[x], Op::SelectMean { x, indices }))
    }

    /// Cosine similarity of two equally long vectors, as a scalar.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.numel() != tb.numel() {
            return Err(mismatch("cosine_similarity", ta, tb));
        }
        let n = ta.numel();
        let ra = self.reshape(a, vec![1, n])?;
        let rb = self.reshape(b, vec![1, n])?;
        let na = self.normalize_rows(ra).map_err(|_| TensorError::Degenerate {
            op: "cosine_similarity",
            msg: "zero-norm vector".into(),
        })?;
        let nb = self.normalize_rows(rb).map_err(|_| TensorError::Degenerate {
            op: "cosine_similarity",
            msg: "zero-norm vector".into(),
        })?;
        let prod = self.mul(na, nb)?;
        self.sum(prod)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| self.nodes[i].requires_grad)
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_nt_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(ta.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[0];
                if let Some(ga) = self.acc(grads, *a) {
                    matmul_acc(g, tb.data(), ga, m, n, k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    matmul_tn_acc(g, ta.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(db) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(da) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Silu(a) => {
                let da = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), &v) in ga.iter_mut().zip(g).zip(da) {
                        let s = sigmoid(v);
                        *x += gy * s * (1.0 + v * (1.0 - s));
                    }
                }
            }
            Op::Relu(a) => {
                let da = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), &v) in ga.iter_mut().zip(g).zip(da) {
                        if v > 0.0 {
                            *x += gy;
                        }
                    }
                }
            }
            Op::LogClamped { x, floor } => {
                let dx = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for ((a, gy), &v) in gx.iter_mut().zip(g).zip(dx) {
                        if v > *floor {
                            *a += gy / v;
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (tx, tg) = (self.value(*x), self.value(*gain));
                let d = tx.cols();
                let gd = tg.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let mut s = 0.0;
                        for j in 0..d {
                            s += gr[j] * gd[j] * xr[j];
                        }
                        let coef = inv * inv * inv * s / d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv * gd[j] * gr[j] - coef * xr[j];
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gain) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let xr = tx.row(r);
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xr[j] * inv;
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_split("softmax", node.value.shape(), *axis).expect("validated in forward");
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let s: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] += y[idx] * (g[idx] - s);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) =
                    axis_split("log_softmax", node.value.shape(), *axis).expect("validated in forward");
                if let Some(gx) = self.acc(grads, *x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let s: f64 = (0..len).map(|j| g[base + j * inner]).sum();
                            for j in 0..len {
                                let idx = base + j * inner;
                                gx[idx] += g[idx] - y[idx].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::MaskedLogSoftmax { x, allowed } => {
                let y = node.value.data();
                let cols = node.value.cols();
                let rows = node.value.rows();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let mr = &allowed[r * cols..(r + 1) * cols];
                        let mut s = 0.0;
                        for c in 0..cols {
                            if mr[c] {
                                s += g[r * cols + c];
                            }
                        }
                        for c in 0..cols {
                            if mr[c] {
                                let idx = r * cols + c;
                                gx[idx] += g[idx] - y[idx].exp() * s;
                            }
                        }
                    }
                }
            }
            Op::Rope { x, positions, heads, base } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let width = node.value.cols();
                    let mut back = g.to_vec();
                    kernels::rope_in_place(&mut back, positions, *heads, width / heads, *base, -1.0);
                    gx.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
                }
            }
            Op::Attention { q, k, v, mask, heads, probs } => {
                self.attention_backward(*q, *k, *v, mask, *heads, probs, g, grads);
            }
            Op::GatherRows { x, indices } => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            gx[i * cols + c] += g[r * cols + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if let Some(gp) = self.acc(grads, *p) {
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let cols = node.value.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    let o = start * cols;
                    gx[o..o + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let rows = node.value.rows();
                let w = node.value.cols();
                let cols = self.value(*x).cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for r in 0..rows {
                        for c in 0..w {
                            gx[r * cols + start + c] += g[r * w + c];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let n = gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += g[0] / n);
                }
            }
            Op::SmoothL1 { pred, target, beta } => {
                let (dp, dt) = (self.value(*pred).data(), self.value(*target).data());
                let n = dp.len().max(1) as f64;
                let deriv: Vec<f64> = dp
                    .iter()
                    .zip(dt)
                    .map(|(p, t)| {
                        let d = p - t;
                        let s = if d.abs() < *beta { d / beta } else { d.signum() };
                        g[0] * s / n
                    })
                    .collect();
                if let Some(gp) = self.acc(grads, *pred) {
                    gp.iter_mut().zip(&deriv).for_each(|(a, b)| *a += b);
                }
                if let Some(gt) = self.acc(grads, *target) {
                    gt.iter_mut().zip(&deriv).for_each(|(a, b)| *a -= b);
                }
            }
            Op::CrossEntropy { log_probs, target } => {
                let rows = self.value(*log_probs).rows().max(1) as f64;
                let (dl, dq) = (self.value(*log_probs).data(), self.value(*target).data());
                if let Some(gl) = self.acc(grads, *log_probs) {
                    gl.iter_mut().zip(dq).for_each(|(a, q)| *a -= g[0] * q / rows);
                }
                if let Some(gq) = self.acc(grads, *target) {
                    gq.iter_mut().zip(dl).for_each(|(a, l)| *a -= g[0] * l / rows);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let cols = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &norm) in norms.iter().enumerate() {
                        let yr = y.row(r);
                        let gr = &g[r * cols..(r + 1) * cols];
                        let proj = dot(yr, gr);
                        for c in 0..cols {
                            gx[r * cols + c] += (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                }
            }
            Op::SelectMean { x, indices } => {
                if let Some(gx) = self.acc(grads, *x) {
                    let w = g[0] / indices.len() as f64;
                    for &i in indices {
                        gx[i] += w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        mask: &AttnMask,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let (sq, width) = (tq.rows(), tq.cols());
        let sk = tk.rows();
        let hd = width / heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut gq = vec![0.0; sq * width];
        let mut gk = vec![0.0; sk * width];
        let mut gv = vec![0.0; sk * width];
        let mut dp = Vec::with_capacity(sk);
        for i in 0..sq {
            let vis = mask.visible(i, sk);
            for h in 0..heads {
                let o = h * hd;
                let go = &g[i * width + o..i * width + o + hd];
                let prow = &probs[(h * sq + i) * sk..(h * sq + i + 1) * sk];
                dp.clear();
                let mut s = 0.0;
                for &r in &vis {
                    let d = dot(go, &tv.data()[r * width + o..r * width + o + hd]);
                    s += d * prow[r];
                    dp.push(d);
                }
                for (idx, &r) in vis.iter().enumerate() {
                    let p = prow[r];
                    for j in 0..hd {
                        gv[r * width + o + j] += p * go[j];
                    }
                    let ds = p * (dp[idx] - s) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for j in 0..hd {
                        gq[i * width + o + j] += ds * tk.data()[r * width + o + j];
                        gk[r * width + o + j] += ds * tq.data()[i * width + o + j];
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(acc) = self.acc(grads, var) {
                acc.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
