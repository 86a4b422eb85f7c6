//! Raw numeric kernels shared by the forward primitives and the backward
//! rules. Everything here works on flat `f64` slices plus explicit shapes.

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Right-aligned broadcast result shape: extents compared from the last axis
/// backwards must be equal or 1. `None` means the shapes do not conform.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        out[rank - 1 - i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Row-major strides, with stride 0 on axes the operand broadcasts along.
/// `shape` is right-aligned inside `out_shape`.
pub(crate) fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in 0..shape.len() {
        let axis = shape.len() - 1 - i;
        if shape[axis] != 1 {
            strides[rank - 1 - i] = acc;
        }
        acc *= shape[axis];
    }
    strides
}

/// Applies `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn binary_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
    }
    let n = numel(out_shape);
    let sa = broadcast_strides(a_shape, out_shape);
    let sb = broadcast_strides(b_shape, out_shape);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(f(a[off_a], b[off_b]));
        // odometer increment
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off_a += sa[axis];
            off_b += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            off_a -= sa[axis] * out_shape[axis];
            off_b -= sb[axis] * out_shape[axis];
        }
    }
    out
}

/// Sums a gradient of `out_shape` down to `in_shape` (the reverse of a
/// broadcast to `out_shape`).
pub(crate) fn reduce_to_shape(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return grad.to_vec();
    }
    let strides = broadcast_strides(in_shape, out_shape);
    let rank = out_shape.len();
    let mut out = vec![0.0f64; numel(in_shape)];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for &g in grad {
        out[off] += g;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            off += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            off -= strides[axis] * out_shape[axis];
        }
    }
    out
}

/// `[m,k] @ [k,n]` row-major matrix product.
pub(crate) fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Decomposes a shape around `axis` into `(outer, len, inner)` so that the
/// flat offset of element `(o, j, i)` is `(o * len + j) * inner + i`.
pub(crate) fn reduce_axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

/// Iterates slices along `axis`, handing `f` the base offset and stride of
/// each 1-D lane of length `shape[axis]`.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let (outer, len, inner) = reduce_axis_layout(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

/// `log(sum(exp(lane)))` with the max subtracted for stability.
pub(crate) fn logsumexp_lane(lane: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = lane.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = lane.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
