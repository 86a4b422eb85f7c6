//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable row-major buffers. Differentiation works by
//! recording every primitive application on a [`Tape`]; calling
//! [`Tape::backward`] on a scalar loss replays the records in reverse and
//! returns a gradient per trainable parameter.
//!
//! Storage is always `f64`. A tensor with [`DType::F32`] has its values
//! rounded through `f32` after every primitive, so single-precision forward
//! semantics are observable while backward accumulation stays in `f64`.
//!
//! Broadcasting follows trailing (right-aligned) alignment: extents are
//! compared from the last axis backwards and must be equal or 1. Anything
//! else is a [`TensorError::ShapeMismatch`].

mod kernels;
mod ops;
mod tape;
#[cfg(test)]
mod tests;

pub use ops::ConvPadding;
pub use tape::{GradientMap, Tape};

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use thiserror::Error;

pub(crate) use kernels::numel;

/// Element precision of a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    pub fn byte_width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F64 => write!(f, "f64"),
            DType::F32 => write!(f, "f32"),
        }
    }
}

/// Stable identity of a trainable parameter, preserved across tapes and
/// across in-place value updates by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// Handle of a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef {
    pub(crate) tape: u64,
    pub(crate) index: usize,
}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: produced a non-finite value")]
    Overflow { op: &'static str },
    #[error("backward requires a scalar loss, got {numel} elements")]
    NotScalar { numel: usize },
    #[error("tensor is not attached to this tape")]
    DetachedTensor,
    #[error("{op}: operands have different dtypes")]
    DTypeMismatch { op: &'static str },
    #[error("{op}: index {index} out of range (bound {bound})")]
    InvalidIndex { op: &'static str, index: usize, bound: usize },
    #[error("valid convolution on sequence of length {len} with kernel width {width} would be empty")]
    EmptySequenceAfterValidConv { len: usize, width: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Immutable dense tensor. Cloning is cheap (the buffer is shared).
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: DType,
    values: Arc<Vec<f64>>,
    node: Option<NodeRef>,
    param: Option<ParamId>,
}

impl Tensor {
    pub fn from_vec(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec_dtype(values, shape, DType::F64)
    }

    pub fn from_vec_dtype(mut values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        if numel(shape) != values.len() {
            return Err(TensorError::ShapeMismatch {
                op: "from_vec",
                detail: format!("shape {:?} needs {} values, got {}", shape, numel(shape), values.len()),
            });
        }
        quantize(dtype, &mut values);
        Ok(Tensor {
            shape: shape.to_vec(),
            dtype,
            values: Arc::new(values),
            node: None,
            param: None,
        })
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(vec![v], &[]).expect("scalar shape")
    }

    pub fn scalar_dtype(v: f64, dtype: DType) -> Tensor {
        Tensor::from_vec_dtype(vec![v], &[], dtype).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        Tensor::from_vec(vec![v; numel(shape)], shape).expect("filled shape")
    }

    pub fn zeros_dtype(shape: &[usize], dtype: DType) -> Tensor {
        Tensor::from_vec_dtype(vec![0.0; numel(shape)], shape, dtype).expect("zeros shape")
    }

    /// Creates a trainable leaf with a fresh [`ParamId`].
    pub fn parameter(values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Tensor::parameter_dtype(values, shape, DType::F64)
    }

    pub fn parameter_dtype(values: Vec<f64>, shape: &[usize], dtype: DType) -> Result<Tensor> {
        let mut t = Tensor::from_vec_dtype(values, shape, dtype)?;
        t.param = Some(ParamId::fresh());
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    /// The single value of a scalar (or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar { numel: self.numel() });
        }
        Ok(self.values[0])
    }

    /// Whether gradients flow through this tensor: it is a trainable leaf or
    /// was produced on a live tape from one.
    pub fn requires_grad(&self) -> bool {
        self.param.is_some() || self.node.is_some()
    }

    pub fn param_id(&self) -> Option<ParamId> {
        self.param
    }

    pub(crate) fn node_ref(&self) -> Option<NodeRef> {
        self.node
    }

    pub(crate) fn with_node(mut self, node: NodeRef) -> Tensor {
        self.node = Some(node);
        self
    }

    /// Same identity (shape, dtype, param id) with replaced values. Used by
    /// the optimizer; the result is not attached to any tape.
    pub fn with_values(&self, mut values: Vec<f64>) -> Result<Tensor> {
        if values.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "with_values",
                detail: format!("expected {} values, got {}", self.numel(), values.len()),
            });
        }
        quantize(self.dtype, &mut values);
        Ok(Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            values: Arc::new(values),
            node: None,
            param: self.param,
        })
    }

    /// A copy that no longer participates in differentiation.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            values: Arc::clone(&self.values),
            node: None,
            param: None,
        }
    }

    /// Row-major element access by multi-index (test/debug helper).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(self.shape.iter()).enumerate() {
            assert!(ix < ext, "index {ix} out of range on axis {i}");
            off = off * ext + ix;
        }
        self.values[off]
    }

    pub(crate) fn values_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.values)
    }
}

pub(crate) fn quantize(dtype: DType, values: &mut [f64]) {
    if dtype == DType::F32 {
        for v in values.iter_mut() {
            *v = *v as f32 as f64;
        }
    }
}

#[cfg(test)]
mod type_tests {
    use super::*;

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item().unwrap(), 2.5);
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::from_vec(vec![1.0, 2.0, 3.0], &[2, 2]).is_err());
    }

    #[test]
    fn parameter_ids_are_unique_and_survive_with_values() {
        let a = Tensor::parameter(vec![1.0], &[1]).unwrap();
        let b = Tensor::parameter(vec![1.0], &[1]).unwrap();
        assert_ne!(a.param_id(), b.param_id());
        let a2 = a.with_values(vec![9.0]).unwrap();
        assert_eq!(a.param_id(), a2.param_id());
        assert_eq!(a2.values(), &[9.0]);
    }

    #[test]
    fn f32_dtype_rounds_through_single_precision() {
        let v = 0.1f64 + 1e-12;
        let t = Tensor::from_vec_dtype(vec![v], &[1], DType::F32).unwrap();
        assert_eq!(t.values()[0], v as f32 as f64);
        assert_ne!(t.values()[0], v);
    }

    #[test]
    fn at_indexes_row_major() {
        let t = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.at(&[0, 2]), 3.0);
        assert_eq!(t.at(&[1, 0]), 4.0);
    }
}
