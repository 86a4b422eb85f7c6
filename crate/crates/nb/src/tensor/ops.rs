//! Forward implementations of the differentiable primitives.
//!
//! Every method validates operand conformance, computes the result in `f64`,
//! and hands off to [`Tape::finish`], which checks finiteness, applies dtype
//! rounding and records the node when gradients are needed.

use std::sync::Arc;

use super::kernels as k;
use super::tape::NodeOp;
use super::{Result, Tape, Tensor, TensorError};

/// Padding mode of [`Tape::conv1d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvPadding {
    /// No padding; output length `T - w + 1`.
    Valid,
    /// Symmetric zero padding keeping the output length at `T`; the extra
    /// pad goes on the right when the kernel width is even.
    Same,
}

impl Tape {
    fn binary(
        &mut self,
        name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(usize, usize) -> NodeOp,
    ) -> Result<Tensor> {
        if a.dtype() != b.dtype() {
            return Err(TensorError::DTypeMismatch { op: name });
        }
        let out_shape = k::broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        })?;
        let values = k::binary_broadcast(a.values(), a.shape(), b.values(), b.shape(), &out_shape, f);
        self.finish(name, values, out_shape, a.dtype(), &[a, b], |_, ids| make(ids[0], ids[1]))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("add", a, b, |x, y| x + y, NodeOp::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("sub", a, b, |x, y| x - y, NodeOp::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary("mul_elementwise", a, b, |x, y| x * y, NodeOp::Mul)
    }

    /// Multiplies by a plain scalar constant.
    pub fn scale(&mut self, t: &Tensor, c: f64) -> Result<Tensor> {
        let c = Tensor::scalar_dtype(c, t.dtype());
        self.mul(t, &c)
    }

    /// Adds a plain scalar constant.
    pub fn add_scalar(&mut self, t: &Tensor, c: f64) -> Result<Tensor> {
        let c = Tensor::scalar_dtype(c, t.dtype());
        self.add(t, &c)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.dtype() != b.dtype() {
            return Err(TensorError::DTypeMismatch { op: "matmul" });
        }
        let (ra, rb) = (a.shape().len(), b.shape().len());
        if ra != 2 || rb != 2 || a.shape()[1] != b.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} @ {:?}", a.shape(), b.shape()),
            });
        }
        let (m, kk) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let values = k::matmul(a.values(), m, kk, b.values(), n);
        self.finish("matmul", values, vec![m, n], a.dtype(), &[a, b], |_, ids| NodeOp::Matmul(ids[0], ids[1]))
    }

    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| TensorError::ShapeMismatch {
            op: "concat",
            detail: "no operands".into(),
        })?;
        let rank = first.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "concat", axis, rank });
        }
        let mut axis_total = 0usize;
        for p in parts {
            if p.dtype() != first.dtype() {
                return Err(TensorError::DTypeMismatch { op: "concat" });
            }
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{:?} vs {:?} on axis {axis}", p.shape(), first.shape()),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = k::reduce_axis_layout(&out_shape, axis);
        let mut values = vec![0.0f64; k::numel(&out_shape)];
        let mut offset = 0usize;
        for p in parts {
            let len = p.shape()[axis];
            for o in 0..outer {
                let dst = (o * axis_total + offset) * inner;
                let src = o * len * inner;
                values[dst..dst + len * inner].copy_from_slice(&p.values()[src..src + len * inner]);
            }
            offset += len;
        }
        self.finish("concat", values, out_shape, first.dtype(), parts, |_, ids| NodeOp::Concat {
            inputs: ids,
            axis,
        })
    }

    /// Copies the range `start..start+len` along `axis`.
    pub fn slice(&mut self, t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let rank = t.shape().len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { op: "slice", axis, rank });
        }
        let extent = t.shape()[axis];
        if len == 0 || start + len > extent {
            return Err(TensorError::ShapeMismatch {
                op: "slice",
                detail: format!("range {start}..{} on extent {extent}", start + len),
            });
        }
        let mut out_shape = t.shape().to_vec();
        out_shape[axis] = len;
        let (outer, in_len, inner) = k::reduce_axis_layout(t.shape(), axis);
        let mut values = vec![0.0f64; k::numel(&out_shape)];
        for o in 0..outer {
            let src = (o * in_len + start) * inner;
            let dst = o * len * inner;
            values[dst..dst + len * inner].copy_from_slice(&t.values()[src..src + len * inner]);
        }
        self.finish("slice", values, out_shape, t.dtype(), &[t], |_, ids| NodeOp::Slice {
            input: ids[0],
            axis,
            start,
        })
    }

    pub fn reshape(&mut self, t: &Tensor, new_shape: &[usize]) -> Result<Tensor> {
        if k::numel(new_shape) != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {:?}", t.shape(), new_shape),
            });
        }
        self.finish("reshape", t.values().to_vec(), new_shape.to_vec(), t.dtype(), &[t], |_, ids| {
            NodeOp::Reshape { input: ids[0] }
        })
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, t: &Tensor) -> Result<Tensor> {
        if t.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", t.shape()),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let values = k::transpose(t.values(), rows, cols);
        self.finish("transpose", values, vec![cols, rows], t.dtype(), &[t], |_, ids| NodeOp::Transpose {
            input: ids[0],
        })
    }

    fn reduced_shape(t: &Tensor, axis: Option<usize>, keepdim: bool, op: &'static str) -> Result<Vec<usize>> {
        match axis {
            None => Ok(if keepdim { vec![1; t.shape().len()] } else { vec![] }),
            Some(a) => {
                if a >= t.shape().len() {
                    return Err(TensorError::InvalidAxis { op, axis: a, rank: t.shape().len() });
                }
                let mut s = t.shape().to_vec();
                if keepdim {
                    s[a] = 1;
                } else {
                    s.remove(a);
                }
                Ok(s)
            }
        }
    }

    pub fn sum(&mut self, t: &Tensor, axis: Option<usize>, keepdim: bool) -> Result<Tensor> {
        let out_shape = Self::reduced_shape(t, axis, keepdim, "sum")?;
        let values = match axis {
            None => vec![t.values().iter().sum::<f64>()],
            Some(a) => {
                let len = t.shape()[a];
                let mut out = Vec::with_capacity(k::numel(&out_shape));
                k::for_each_lane(t.shape(), a, |base, stride| {
                    out.push((0..len).map(|j| t.values()[base + j * stride]).sum::<f64>());
                });
                out
            }
        };
        self.finish("sum", values, out_shape, t.dtype(), &[t], |_, ids| NodeOp::Sum { input: ids[0], axis })
    }

    pub fn mean(&mut self, t: &Tensor, axis: Option<usize>, keepdim: bool) -> Result<Tensor> {
        let out_shape = Self::reduced_shape(t, axis, keepdim, "mean")?;
        let values = match axis {
            None => vec![t.values().iter().sum::<f64>() / t.numel() as f64],
            Some(a) => {
                let len = t.shape()[a];
                let mut out = Vec::with_capacity(k::numel(&out_shape));
                k::for_each_lane(t.shape(), a, |base, stride| {
                    out.push((0..len).map(|j| t.values()[base + j * stride]).sum::<f64>() / len as f64);
                });
                out
            }
        };
        self.finish("mean", values, out_shape, t.dtype(), &[t], |_, ids| NodeOp::Mean { input: ids[0], axis })
    }

    /// Maximum along an axis (or of all elements). Ties route the gradient
    /// to the first maximal element.
    pub fn max(&mut self, t: &Tensor, axis: Option<usize>, keepdim: bool) -> Result<Tensor> {
        let out_shape = Self::reduced_shape(t, axis, keepdim, "max")?;
        let mut argmax = Vec::with_capacity(k::numel(&out_shape));
        let mut values = Vec::with_capacity(k::numel(&out_shape));
        match axis {
            None => {
                let (mut best, mut best_at) = (f64::NEG_INFINITY, 0usize);
                for (i, &v) in t.values().iter().enumerate() {
                    if v > best {
                        best = v;
                        best_at = i;
                    }
                }
                values.push(best);
                argmax.push(best_at);
            }
            Some(a) => {
                let len = t.shape()[a];
                k::for_each_lane(t.shape(), a, |base, stride| {
                    let (mut best, mut best_at) = (f64::NEG_INFINITY, base);
                    for j in 0..len {
                        let p = base + j * stride;
                        if t.values()[p] > best {
                            best = t.values()[p];
                            best_at = p;
                        }
                    }
                    values.push(best);
                    argmax.push(best_at);
                });
            }
        }
        self.finish("max", values, out_shape, t.dtype(), &[t], |_, ids| NodeOp::Max {
            input: ids[0],
            argmax,
        })
    }

    fn unary(
        &mut self,
        name: &'static str,
        t: &Tensor,
        f: impl Fn(f64) -> f64,
        make: impl FnOnce(usize) -> NodeOp,
    ) -> Result<Tensor> {
        let values: Vec<f64> = t.values().iter().map(|&v| f(v)).collect();
        self.finish(name, values, t.shape().to_vec(), t.dtype(), &[t], |_, ids| make(ids[0]))
    }

    pub fn exp(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary("exp", t, f64::exp, |input| NodeOp::Exp { input })
    }

    pub fn log(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary("log", t, f64::ln, |input| NodeOp::Log { input })
    }

    pub fn tanh(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary("tanh", t, f64::tanh, |input| NodeOp::Tanh { input })
    }

    pub fn sigmoid(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary("sigmoid", t, |v| 1.0 / (1.0 + (-v).exp()), |input| NodeOp::Sigmoid { input })
    }

    pub fn relu(&mut self, t: &Tensor) -> Result<Tensor> {
        self.unary("relu", t, |v| v.max(0.0), |input| NodeOp::Relu { input })
    }

    pub fn softmax(&mut self, t: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= t.shape().len() {
            return Err(TensorError::InvalidAxis { op: "softmax", axis, rank: t.shape().len() });
        }
        let values = softmax_values(t.values(), t.shape(), axis, false);
        self.finish("softmax", values, t.shape().to_vec(), t.dtype(), &[t], |_, ids| NodeOp::Softmax {
            input: ids[0],
            axis,
        })
    }

    pub fn log_softmax(&mut self, t: &Tensor, axis: usize) -> Result<Tensor> {
        if axis >= t.shape().len() {
            return Err(TensorError::InvalidAxis { op: "log_softmax", axis, rank: t.shape().len() });
        }
        let values = softmax_values(t.values(), t.shape(), axis, true);
        self.finish("log_softmax", values, t.shape().to_vec(), t.dtype(), &[t], |_, ids| NodeOp::LogSoftmax {
            input: ids[0],
            axis,
        })
    }

    /// Numerically stabilized `log(sum(exp(t)))` along `axis` (or over all
    /// elements when `axis` is `None`).
    pub fn logsumexp(&mut self, t: &Tensor, axis: Option<usize>, keepdim: bool) -> Result<Tensor> {
        let out_shape = Self::reduced_shape(t, axis, keepdim, "logsumexp")?;
        let values = match axis {
            None => vec![k::logsumexp_lane(t.values().iter().cloned())],
            Some(a) => {
                let len = t.shape()[a];
                let mut out = Vec::with_capacity(k::numel(&out_shape));
                k::for_each_lane(t.shape(), a, |base, stride| {
                    out.push(k::logsumexp_lane((0..len).map(|j| t.values()[base + j * stride])));
                });
                out
            }
        };
        self.finish("logsumexp", values, out_shape, t.dtype(), &[t], |_, ids| NodeOp::LogSumExp {
            input: ids[0],
            axis,
        })
    }

    /// Gathers rows of `table` (`[V, D]`) by id, producing `[ids.len(), D]`.
    pub fn embedding_lookup(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        if table.shape().len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                detail: format!("table must be rank 2, got {:?}", table.shape()),
            });
        }
        let (vocab, dim) = (table.shape()[0], table.shape()[1]);
        if ids.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_lookup",
                detail: "no ids".into(),
            });
        }
        let mut values = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::InvalidIndex { op: "embedding_lookup", index: id, bound: vocab });
            }
            values.extend_from_slice(&table.values()[id * dim..(id + 1) * dim]);
        }
        let ids = ids.to_vec();
        self.finish(
            "embedding_lookup",
            values,
            vec![ids.len(), dim],
            table.dtype(),
            &[table],
            |_, node_ids| NodeOp::EmbeddingLookup { table: node_ids[0], ids },
        )
    }

    /// Replaces elements where `mask` is true with `value`; the gradient is
    /// zero at filled positions.
    pub fn masked_fill(&mut self, t: &Tensor, mask: &[bool], value: f64) -> Result<Tensor> {
        if mask.len() != t.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "masked_fill",
                detail: format!("mask has {} entries for {} elements", mask.len(), t.numel()),
            });
        }
        let values: Vec<f64> = t
            .values()
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let mask = Arc::new(mask.to_vec());
        self.finish("masked_fill", values, t.shape().to_vec(), t.dtype(), &[t], |_, ids| NodeOp::MaskedFill {
            input: ids[0],
            mask,
        })
    }

    /// 1-D convolution over the leading (time) axis.
    ///
    /// `input` is `[T, C_in]`, `kernels` is `[w, C_in, C_out]`; the output is
    /// `[T - w + 1, C_out]` under [`ConvPadding::Valid`] and `[T, C_out]`
    /// under [`ConvPadding::Same`].
    pub fn conv1d(&mut self, input: &Tensor, kernels: &Tensor, padding: ConvPadding) -> Result<Tensor> {
        if input.dtype() != kernels.dtype() {
            return Err(TensorError::DTypeMismatch { op: "conv1d" });
        }
        if input.shape().len() != 2 || kernels.shape().len() != 3 || input.shape()[1] != kernels.shape()[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: format!("input {:?}, kernels {:?}", input.shape(), kernels.shape()),
            });
        }
        let (t_len, c_in) = (input.shape()[0], input.shape()[1]);
        let (width, _, c_out) = (kernels.shape()[0], kernels.shape()[1], kernels.shape()[2]);
        if width == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                detail: "kernel width 0".into(),
            });
        }
        let (out_len, pad_left) = match padding {
            ConvPadding::Valid => {
                if t_len < width {
                    return Err(TensorError::EmptySequenceAfterValidConv { len: t_len, width });
                }
                (t_len - width + 1, 0usize)
            }
            ConvPadding::Same => (t_len, (width - 1) / 2),
        };
        let x = input.values();
        let kern = kernels.values();
        let mut values = vec![0.0f64; out_len * c_out];
        for t in 0..out_len {
            for kw in 0..width {
                let s = t as i64 + kw as i64 - pad_left as i64;
                if s < 0 || s >= t_len as i64 {
                    continue;
                }
                let x_row = &x[s as usize * c_in..(s as usize + 1) * c_in];
                for (ci, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let k_row = &kern[(kw * c_in + ci) * c_out..(kw * c_in + ci + 1) * c_out];
                    let out_row = &mut values[t * c_out..(t + 1) * c_out];
                    for co in 0..c_out {
                        out_row[co] += xv * k_row[co];
                    }
                }
            }
        }
        self.finish("conv1d", values, vec![out_len, c_out], input.dtype(), &[input, kernels], |_, ids| {
            NodeOp::Conv1d { input: ids[0], kernels: ids[1], pad_left }
        })
    }

    /// Stacks rank-1 tensors of equal length into a `[n, D]` matrix.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        let mut reshaped = Vec::with_capacity(rows.len());
        for r in rows {
            let d = r.numel();
            reshaped.push(self.reshape(r, &[1, d])?);
        }
        let refs: Vec<&Tensor> = reshaped.iter().collect();
        self.concat(&refs, 0)
    }
}

/// Stable softmax / log-softmax along one (possibly strided) axis.
fn softmax_values(x: &[f64], shape: &[usize], axis: usize, log: bool) -> Vec<f64> {
    let len = shape[axis];
    let mut out = vec![0.0f64; x.len()];
    k::for_each_lane(shape, axis, |base, stride| {
        let mut max = f64::NEG_INFINITY;
        for j in 0..len {
            max = max.max(x[base + j * stride]);
        }
        let mut sum = 0.0;
        for j in 0..len {
            let p = base + j * stride;
            let e = (x[p] - max).exp();
            out[p] = e;
            sum += e;
        }
        if log {
            let lse = max + sum.ln();
            for j in 0..len {
                let p = base + j * stride;
                out[p] = x[p] - lse;
            }
        } else {
            for j in 0..len {
                out[base + j * stride] /= sum;
            }
        }
    });
    out
}

/// Backward kernel for [`Tape::conv1d`]; returns `(d_input, d_kernels)`.
pub(crate) fn conv1d_backward(
    g: &[f64],
    out_shape: &[usize],
    x: &[f64],
    x_shape: &[usize],
    kern: &[f64],
    kern_shape: &[usize],
    pad_left: usize,
) -> (Vec<f64>, Vec<f64>) {
    let (out_len, c_out) = (out_shape[0], out_shape[1]);
    let (t_len, c_in) = (x_shape[0], x_shape[1]);
    let width = kern_shape[0];
    let mut dx = vec![0.0f64; x.len()];
    let mut dk = vec![0.0f64; kern.len()];
    for t in 0..out_len {
        let g_row = &g[t * c_out..(t + 1) * c_out];
        for kw in 0..width {
            let s = t as i64 + kw as i64 - pad_left as i64;
            if s < 0 || s >= t_len as i64 {
                continue;
            }
            let s = s as usize;
            for ci in 0..c_in {
                let k_row = &kern[(kw * c_in + ci) * c_out..(kw * c_in + ci + 1) * c_out];
                let xv = x[s * c_in + ci];
                let mut acc = 0.0;
                for co in 0..c_out {
                    acc += g_row[co] * k_row[co];
                    dk[(kw * c_in + ci) * c_out + co] += xv * g_row[co];
                }
                dx[s * c_in + ci] += acc;
            }
        }
    }
    (dx, dk)
}
