//! The recording tape and the reverse sweep.
//!
//! Node ids are assigned in application order, so every record's inputs have
//! strictly smaller ids than its output and a single reverse iteration visits
//! the graph in valid topological order.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels as k;
use super::{DType, NodeRef, ParamId, Result, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) struct Node {
    pub values: Arc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub op: NodeOp,
}

pub(crate) enum NodeOp {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Matmul(usize, usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Reshape { input: usize },
    Transpose { input: usize },
    Sum { input: usize, axis: Option<usize> },
    Mean { input: usize, axis: Option<usize> },
    Max { input: usize, argmax: Vec<usize> },
    Exp { input: usize },
    Log { input: usize },
    Tanh { input: usize },
    Sigmoid { input: usize },
    Relu { input: usize },
    Softmax { input: usize, axis: usize },
    LogSoftmax { input: usize, axis: usize },
    LogSumExp { input: usize, axis: Option<usize> },
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    MaskedFill { input: usize, mask: Arc<Vec<bool>> },
    Conv1d { input: usize, kernels: usize, pad_left: usize },
}

/// Gradients keyed by parameter identity. Every entry has the shape of its
/// parameter; values are `f64` regardless of the parameter dtype.
#[derive(Debug, Default)]
pub struct GradientMap {
    grads: HashMap<ParamId, Tensor>,
}

impl GradientMap {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(id, t)| (*id, t))
    }
}

/// Records primitive applications for one forward pass.
///
/// A tape is single-owner: create one per training step, run the forward
/// pass through its methods, call [`Tape::backward`], drop it. A disabled
/// tape ([`Tape::disabled`]) computes forward values without recording,
/// which is what evaluation uses.
pub struct Tape {
    pub(crate) id: u64,
    pub(crate) enabled: bool,
    pub(crate) nodes: Vec<Node>,
    pub(crate) param_leaves: HashMap<ParamId, usize>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            enabled: true,
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    /// A tape that never records; outputs come back detached.
    pub fn disabled() -> Tape {
        let mut t = Tape::new();
        t.enabled = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True when `t` would contribute gradient if used as an operand here.
    pub(crate) fn tracks(&self, t: &Tensor) -> bool {
        if !self.enabled {
            return false;
        }
        if t.param_id().is_some() {
            return true;
        }
        matches!(t.node_ref(), Some(n) if n.tape == self.id)
    }

    /// Interns an operand as a node on this tape. Parameters are
    /// deduplicated by [`ParamId`] so repeated use accumulates into one
    /// gradient slot; plain values become constant leaves.
    pub(crate) fn intern(&mut self, t: &Tensor) -> usize {
        if let Some(n) = t.node_ref() {
            if n.tape == self.id {
                return n.index;
            }
        }
        if let Some(pid) = t.param_id() {
            if let Some(&idx) = self.param_leaves.get(&pid) {
                return idx;
            }
            let idx = self.push_node(t.values_arc(), t.shape().to_vec(), NodeOp::Leaf { param: Some(pid) });
            self.param_leaves.insert(pid, idx);
            return idx;
        }
        self.push_node(t.values_arc(), t.shape().to_vec(), NodeOp::Leaf { param: None })
    }

    pub(crate) fn push_node(&mut self, values: Arc<Vec<f64>>, shape: Vec<usize>, op: NodeOp) -> usize {
        self.nodes.push(Node { values, shape, op });
        self.nodes.len() - 1
    }

    /// Finalizes a primitive: checks finiteness, applies dtype rounding and
    /// records the node when any operand is tracked.
    pub(crate) fn finish(
        &mut self,
        op_name: &'static str,
        mut values: Vec<f64>,
        shape: Vec<usize>,
        dtype: DType,
        operands: &[&Tensor],
        make_op: impl FnOnce(&mut Tape, Vec<usize>) -> NodeOp,
    ) -> Result<Tensor> {
        super::quantize(dtype, &mut values);
        if !values.iter().all(|v| v.is_finite()) {
            return Err(TensorError::Overflow { op: op_name });
        }
        let values = Arc::new(values);
        let mut out = Tensor::from_arc(values.clone(), shape.clone(), dtype);
        if operands.iter().any(|t| self.tracks(t)) {
            let ids: Vec<usize> = operands.iter().map(|t| self.intern(t)).collect();
            let op = make_op(self, ids);
            let idx = self.push_node(values, shape, op);
            out = out.with_node(NodeRef { tape: self.id, index: idx });
        }
        Ok(out)
    }

    /// Reverse sweep from a scalar loss. Returns one gradient per parameter
    /// registered on this tape; parameters the loss does not reach get
    /// zeros. Gradients for repeated parameter uses accumulate additively.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        let node = match loss.node_ref() {
            Some(n) if n.tape == self.id => n,
            _ => return Err(TensorError::DetachedTensor),
        };
        if loss.numel() != 1 {
            return Err(TensorError::NotScalar { numel: loss.numel() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[node.index] = Some(vec![1.0]);

        for idx in (0..=node.index).rev() {
            if matches!(self.nodes[idx].op, NodeOp::Leaf { .. }) {
                continue; // leaf gradients stay put for the parameter map
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        let mut map = GradientMap::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let NodeOp::Leaf { param: Some(pid) } = node.op {
                let values = grads[idx].take().unwrap_or_else(|| vec![0.0; node.values.len()]);
                map.grads.insert(pid, Tensor::from_vec(values, &node.shape)?);
            }
        }
        Ok(map)
    }

    fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, delta: Vec<f64>) {
        match &mut grads[idx] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(delta.iter()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out_shape = &node.shape;
        let out_vals = &node.values;
        match &node.op {
            NodeOp::Leaf { .. } => {}
            NodeOp::Add(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                Self::accumulate(grads, *a, k::reduce_to_shape(g, out_shape, sa));
                Self::accumulate(grads, *b, k::reduce_to_shape(g, out_shape, sb));
            }
            NodeOp::Sub(a, b) => {
                let (sa, sb) = (&self.nodes[*a].shape, &self.nodes[*b].shape);
                Self::accumulate(grads, *a, k::reduce_to_shape(g, out_shape, sa));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                Self::accumulate(grads, *b, k::reduce_to_shape(&neg, out_shape, sb));
            }
            NodeOp::Mul(a, b) => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let da = k::binary_broadcast(g, out_shape, &nb.values, &nb.shape, out_shape, |x, y| x * y);
                Self::accumulate(grads, *a, k::reduce_to_shape(&da, out_shape, &na.shape));
                let db = k::binary_broadcast(g, out_shape, &na.values, &na.shape, out_shape, |x, y| x * y);
                Self::accumulate(grads, *b, k::reduce_to_shape(&db, out_shape, &nb.shape));
            }
            NodeOp::Matmul(a, b) => {
                let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                let (m, kk) = (na.shape[0], na.shape[1]);
                let n = nb.shape[1];
                // dA = g @ B^T ; dB = A^T @ g
                let bt = k::transpose(&nb.values, kk, n);
                Self::accumulate(grads, *a, k::matmul(g, m, n, &bt, kk));
                let at = k::transpose(&na.values, m, kk);
                Self::accumulate(grads, *b, k::matmul(&at, kk, m, g, n));
            }
            NodeOp::Concat { inputs, axis } => {
                let (_, _, inner) = k::reduce_axis_layout(out_shape, *axis);
                let total_axis = out_shape[*axis];
                let outer: usize = out_shape[..*axis].iter().product();
                let mut offset = 0usize;
                for &inp in inputs {
                    let in_shape = &self.nodes[inp].shape;
                    let len = in_shape[*axis];
                    let mut dg = vec![0.0f64; self.nodes[inp].values.len()];
                    for o in 0..outer {
                        let src = (o * total_axis + offset) * inner;
                        let dst = o * len * inner;
                        dg[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    Self::accumulate(grads, inp, dg);
                    offset += len;
                }
            }
            NodeOp::Slice { input, axis, start } => {
                let in_shape = &self.nodes[*input].shape;
                let (outer, in_len, inner) = k::reduce_axis_layout(in_shape, *axis);
                let out_len = out_shape[*axis];
                let mut dg = vec![0.0f64; self.nodes[*input].values.len()];
                for o in 0..outer {
                    let dst = (o * in_len + start) * inner;
                    let src = o * out_len * inner;
                    dg[dst..dst + out_len * inner].copy_from_slice(&g[src..src + out_len * inner]);
                }
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Reshape { input } => {
                Self::accumulate(grads, *input, g.to_vec());
            }
            NodeOp::Transpose { input } => {
                let (rows, cols) = (out_shape[0], out_shape[1]);
                Self::accumulate(grads, *input, k::transpose(g, rows, cols));
            }
            NodeOp::Sum { input, axis } => {
                let in_shape = &self.nodes[*input].shape;
                Self::accumulate(grads, *input, spread_reduction(g, in_shape, *axis, 1.0));
            }
            NodeOp::Mean { input, axis } => {
                let in_shape = &self.nodes[*input].shape;
                let scale = 1.0
                    / match axis {
                        Some(a) => in_shape[*a] as f64,
                        None => k::numel(in_shape) as f64,
                    };
                Self::accumulate(grads, *input, spread_reduction(g, in_shape, *axis, scale));
            }
            NodeOp::Max { input, argmax } => {
                let mut dg = vec![0.0f64; self.nodes[*input].values.len()];
                for (j, &src) in argmax.iter().enumerate() {
                    dg[src] += g[j];
                }
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Exp { input } => {
                let dg: Vec<f64> = g.iter().zip(out_vals.iter()).map(|(gv, y)| gv * y).collect();
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Log { input } => {
                let x = &self.nodes[*input].values;
                let dg: Vec<f64> = g.iter().zip(x.iter()).map(|(gv, xv)| gv / xv).collect();
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Tanh { input } => {
                let dg: Vec<f64> = g.iter().zip(out_vals.iter()).map(|(gv, y)| gv * (1.0 - y * y)).collect();
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Sigmoid { input } => {
                let dg: Vec<f64> = g.iter().zip(out_vals.iter()).map(|(gv, y)| gv * y * (1.0 - y)).collect();
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Relu { input } => {
                // subgradient 0 at the kink
                let x = &self.nodes[*input].values;
                let dg: Vec<f64> = g.iter().zip(x.iter()).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Softmax { input, axis } => {
                let mut dg = vec![0.0f64; out_vals.len()];
                k::for_each_lane(out_shape, *axis, |base, stride| {
                    let len = out_shape[*axis];
                    let mut dot = 0.0;
                    for j in 0..len {
                        let p = base + j * stride;
                        dot += g[p] * out_vals[p];
                    }
                    for j in 0..len {
                        let p = base + j * stride;
                        dg[p] = out_vals[p] * (g[p] - dot);
                    }
                });
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::LogSoftmax { input, axis } => {
                let mut dg = vec![0.0f64; out_vals.len()];
                k::for_each_lane(out_shape, *axis, |base, stride| {
                    let len = out_shape[*axis];
                    let mut gsum = 0.0;
                    for j in 0..len {
                        gsum += g[base + j * stride];
                    }
                    for j in 0..len {
                        let p = base + j * stride;
                        dg[p] = g[p] - out_vals[p].exp() * gsum;
                    }
                });
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::LogSumExp { input, axis } => {
                let in_node = &self.nodes[*input];
                let x = &in_node.values;
                let mut dg = vec![0.0f64; x.len()];
                match axis {
                    None => {
                        let lse = out_vals[0];
                        for (d, xv) in dg.iter_mut().zip(x.iter()) {
                            *d = g[0] * (xv - lse).exp();
                        }
                    }
                    Some(a) => {
                        let mut out_pos = 0usize;
                        let len = in_node.shape[*a];
                        k::for_each_lane(&in_node.shape, *a, |base, stride| {
                            let lse = out_vals[out_pos];
                            let gv = g[out_pos];
                            for j in 0..len {
                                let p = base + j * stride;
                                dg[p] = gv * (x[p] - lse).exp();
                            }
                            out_pos += 1;
                        });
                    }
                }
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::EmbeddingLookup { table, ids } => {
                let table_node = &self.nodes[*table];
                let dim = table_node.shape[1];
                let mut dg = vec![0.0f64; table_node.values.len()];
                for (row, &id) in ids.iter().enumerate() {
                    let src = row * dim;
                    let dst = id * dim;
                    for j in 0..dim {
                        dg[dst + j] += g[src + j];
                    }
                }
                Self::accumulate(grads, *table, dg);
            }
            NodeOp::MaskedFill { input, mask } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(mask.iter())
                    .map(|(gv, &m)| if m { 0.0 } else { *gv })
                    .collect();
                Self::accumulate(grads, *input, dg);
            }
            NodeOp::Conv1d { input, kernels, pad_left } => {
                let in_node = &self.nodes[*input];
                let kern_node = &self.nodes[*kernels];
                let (dg_in, dg_kern) = super::ops::conv1d_backward(
                    g,
                    out_shape,
                    &in_node.values,
                    &in_node.shape,
                    &kern_node.values,
                    &kern_node.shape,
                    *pad_left,
                );
                Self::accumulate(grads, *input, dg_in);
                Self::accumulate(grads, *kernels, dg_kern);
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Broadcasts a reduced gradient back over the reduced axis (or the whole
/// tensor for a full reduction), scaling each element by `scale`.
fn spread_reduction(g: &[f64], in_shape: &[usize], axis: Option<usize>, scale: f64) -> Vec<f64> {
    match axis {
        None => vec![g[0] * scale; k::numel(in_shape)],
        Some(a) => {
            let (_, len, _) = k::reduce_axis_layout(in_shape, a);
            let mut dg = vec![0.0f64; k::numel(in_shape)];
            let mut out_pos = 0usize;
            k::for_each_lane(in_shape, a, |base, stride| {
                let gv = g[out_pos] * scale;
                for j in 0..len {
                    dg[base + j * stride] = gv;
                }
                out_pos += 1;
            });
            dg
        }
    }
}

impl Tensor {
    pub(crate) fn from_arc(values: Arc<Vec<f64>>, shape: Vec<usize>, dtype: DType) -> Tensor {
        Tensor {
            shape,
            dtype,
            values,
            node: None,
            param: None,
        }
    }
}
