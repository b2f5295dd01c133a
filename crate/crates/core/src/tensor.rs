//! Dense f64 tensors and a reverse-mode tape.
//!
//! A [`Tensor`] is an immutable value plus an optional node id on a [`Tape`].
//! Tensors without a node are constants: they never receive or forward
//! gradient. Every op computes its forward value the same way whether or not
//! the tape is recording, so a non-recording tape (inference) produces
//! bit-identical values to a recording one (training).

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Additive mask value for blocked attention entries.
///
/// Finite so that `mask * 0` in backward never produces NaN.
pub const MASKED: f64 = -1e30;

const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<NodeId>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data: Arc::new(data), node: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: Arc::new(vec![0.0; n]), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: Arc::new(vec![v]), node: None }
    }

    /// 2-D tensor from a list of equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// Rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Same values, no tape node.
    pub fn detached(&self) -> Self {
        Self { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|a| (*a).clone())
    }

    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        self.node = None;
        Arc::make_mut(&mut self.data)
    }

    pub fn shares_storage(&self, other: &Tensor) -> bool {
        Arc::ptr_eq(&self.data, &other.data)
    }

    fn with_node(shape: Vec<usize>, data: Arc<Vec<f64>>, node: Option<NodeId>) -> Self {
        Self { shape, data, node }
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!("{what}: expected 2-D tensor, got shape {:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

type Slot = Option<NodeId>;
type Buf = Arc<Vec<f64>>;

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: bool },
    Add { a: Slot, b: Slot, av: Buf, bv: Buf },
    Scale { a: Slot, av: Buf, s: f64 },
    Mul { a: Slot, b: Slot, av: Buf, bv: Buf },
    MatMul { a: Slot, b: Slot, av: Buf, bv: Buf, m: usize, k: usize, n: usize },
    Transpose { a: Slot, av: Buf, r: usize, c: usize },
    Concat { parts: Vec<(Slot, Buf, usize)>, axis: usize, rows: usize, cols: usize },
    Slice { a: Slot, av: Buf, axis: usize, start: usize, len: usize, rows: usize, cols: usize },
    Gather { table: Slot, tv: Buf, ids: Vec<usize>, cols: usize },
    Sum { a: Slot, av: Buf },
    Mean { a: Slot, av: Buf },
    Softmax { a: Slot, av: Buf, mask: Option<Buf>, rows: usize, cols: usize },
    CrossEntropy { a: Slot, av: Buf, targets: Vec<usize>, probs: Buf, rows: usize, cols: usize },
    RmsNorm { x: Slot, g: Slot, xv: Buf, gv: Buf, inv: Vec<f64>, rows: usize, cols: usize },
    Gelu { a: Slot, av: Buf },
    Rope { a: Slot, av: Buf, positions: Vec<usize>, base: f64, cols: usize },
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add { .. } => "add",
            Op::Scale { .. } => "scale",
            Op::Mul { .. } => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Transpose { .. } => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Gelu { .. } => "gelu",
            Op::Rope { .. } => "rope",
        }
    }

    fn inputs(&self) -> Vec<Slot> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add { a, b, .. } | Op::Mul { a, b, .. } | Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.iter().map(|p| p.0).collect(),
            Op::Gather { table, .. } => vec![*table],
            Op::RmsNorm { x, g, .. } => vec![*x, *g],
            Op::Scale { a, .. }
            | Op::Transpose { a, .. }
            | Op::Slice { a, .. }
            | Op::Sum { a, .. }
            | Op::Mean { a, .. }
            | Op::Softmax { a, .. }
            | Op::CrossEntropy { a, .. }
            | Op::Gelu { a, .. }
            | Op::Rope { a, .. } => vec![*a],
        }
    }

    /// Saved input buffers paired with their slots, in `inputs()` order.
    fn saved_inputs(&self) -> Vec<(Slot, &Buf)> {
        match self {
            Op::Leaf { .. } => vec![],
            Op::Add { a, b, av, bv } | Op::Mul { a, b, av, bv } | Op::MatMul { a, b, av, bv, .. } => {
                vec![(*a, av), (*b, bv)]
            }
            Op::Concat { parts, .. } => parts.iter().map(|p| (p.0, &p.1)).collect(),
            Op::Gather { table, tv, .. } => vec![(*table, tv)],
            Op::RmsNorm { x, g, xv, gv, .. } => vec![(*x, xv), (*g, gv)],
            Op::Scale { a, av, .. }
            | Op::Transpose { a, av, .. }
            | Op::Slice { a, av, .. }
            | Op::Sum { a, av }
            | Op::Mean { a, av }
            | Op::Softmax { a, av, .. }
            | Op::CrossEntropy { a, av, .. }
            | Op::Gelu { a, av }
            | Op::Rope { a, av, .. } => vec![(*a, av)],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    shape: Vec<usize>,
    value: Buf,
    op: Op,
}

/// Append-only record of differentiable operations.
///
/// A non-recording tape computes the same forward values and records nothing.
#[derive(Debug)]
pub struct Tape {
    recording: bool,
    nodes: Vec<Node>,
}

/// Gradients keyed by node id. Missing entries are exactly zero.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradientMap {
    pub fn get(&self, node: NodeId) -> Option<&[f64]> {
        self.grads.get(node).and_then(|g| g.as_deref())
    }

    /// Gradient for a tensor; `None` for constants and unreached nodes.
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|n| self.get(n))
    }

    /// Gradient for a tensor, zero-filled when absent.
    pub fn of_or_zero(&self, t: &Tensor) -> Vec<f64> {
        self.of(t).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], slot: Slot, n: usize, f: impl FnOnce(&mut [f64])) {
    if let Some(id) = slot {
        let g = grads[id].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }
}

impl Tape {
    pub fn new(recording: bool) -> Self {
        Self { recording, nodes: Vec::new() }
    }

    pub fn recording() -> Self {
        Self::new(true)
    }

    pub fn inactive() -> Self {
        Self::new(false)
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor {
        let value = Arc::new(value);
        let live = self.recording && op.inputs().iter().any(Option::is_some);
        let node = if live {
            self.nodes.push(Node { shape: shape.clone(), value: Arc::clone(&value), op });
            Some(self.nodes.len() - 1)
        } else {
            None
        };
        Tensor::with_node(shape, value, node)
    }

    fn push_leaf(&mut self, t: &Tensor, param: bool) -> Tensor {
        if !self.recording {
            return t.detached();
        }
        self.nodes.push(Node { shape: t.shape.clone(), value: Arc::clone(&t.data), op: Op::Leaf { param } });
        Tensor::with_node(t.shape.clone(), Arc::clone(&t.data), Some(self.nodes.len() - 1))
    }

    /// Register a parameter leaf (θ). On an inactive tape this returns a constant.
    pub fn param(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, true)
    }

    /// Register a differentiable non-parameter input (e.g. an incoming carried state).
    pub fn input(&mut self, t: &Tensor) -> Tensor {
        self.push_leaf(t, false)
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.ids_where(|op| matches!(op, Op::Leaf { param: true }))
    }

    pub fn input_ids(&self) -> Vec<NodeId> {
        self.ids_where(|op| matches!(op, Op::Leaf { param: false }))
    }

    fn ids_where(&self, pred: impl Fn(&Op) -> bool) -> Vec<NodeId> {
        self.nodes.iter().enumerate().filter(|(_, n)| pred(&n.op)).map(|(i, _)| i).collect()
    }

    /// All gradient edges `(input node, consumer node)`.
    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        let mut out = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for s in n.op.inputs().into_iter().flatten() {
                out.push((s, i));
            }
        }
        out
    }

    pub fn op_tag(&self, id: NodeId) -> Option<&'static str> {
        self.nodes.get(id).map(|n| n.op.tag())
    }

    /// Number of constant (node-less) inputs consumed by a recorded node.
    pub fn constant_inputs(&self, id: NodeId) -> usize {
        self.nodes.get(id).map_or(0, |n| n.op.inputs().iter().filter(|s| s.is_none()).count())
    }

    /// Stable digest over op tags, wiring, shapes and every saved value.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            n.op.tag().hash(&mut h);
            n.shape.hash(&mut h);
            n.op.inputs().hash(&mut h);
            for v in n.value.iter() {
                v.to_bits().hash(&mut h);
            }
            for (_, buf) in n.op.saved_inputs() {
                for v in buf.iter() {
                    v.to_bits().hash(&mut h);
                }
            }
        }
        h.finish()
    }

    /// Recompute every node from its saved inputs and compare bit-for-bit with
    /// the recorded value. Also checks that saved inputs of attached slots equal
    /// the producer's recorded value and that the node order is topological.
    pub fn verify_replay(&self) -> Result<()> {
        for (i, n) in self.nodes.iter().enumerate() {
            for (slot, buf) in n.op.saved_inputs() {
                if let Some(src) = slot {
                    if src >= i {
                        return Err(Error::Invariant(format!("node {i} consumes later node {src}")));
                    }
                    if !bits_eq(&self.nodes[src].value, buf) {
                        return Err(Error::Invariant(format!("node {i}: saved input differs from node {src}")));
                    }
                }
            }
            let fresh = replay_op(&n.op)?;
            if let Some(fresh) = fresh {
                if !bits_eq(&fresh, &n.value) {
                    return Err(Error::Invariant(format!("node {i} ({}) does not replay bit-exactly", n.op.tag())));
                }
            }
        }
        Ok(())
    }

    // ---- ops -------------------------------------------------------------

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let v = a.data.iter().zip(b.data.iter()).map(|(x, y)| x + y).collect();
        let op = Op::Add { a: a.node, b: b.node, av: a.data.clone(), bv: b.data.clone() };
        Ok(self.push(a.shape.clone(), v, op))
    }

    pub fn scale(&mut self, a: &Tensor, s: f64) -> Tensor {
        let v = a.data.iter().map(|x| x * s).collect();
        self.push(a.shape.clone(), v, Op::Scale { a: a.node, av: a.data.clone(), s })
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let v = a.data.iter().zip(b.data.iter()).map(|(x, y)| x * y).collect();
        let op = Op::Mul { a: a.node, b: b.node, av: a.data.clone(), bv: b.data.clone() };
        Ok(self.push(a.shape.clone(), v, op))
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2("matmul lhs")?;
        let (k2, n) = b.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!("matmul inner dims {k} vs {k2}")));
        }
        let v = kernel_matmul(&a.data, &b.data, m, k, n);
        let op = Op::MatMul { a: a.node, b: b.node, av: a.data.clone(), bv: b.data.clone(), m, k, n };
        Ok(self.push(vec![m, n], v, op))
    }

    pub fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        let (r, c) = a.dims2("transpose")?;
        let v = kernel_transpose(&a.data, r, c);
        Ok(self.push(vec![c, r], v, Op::Transpose { a: a.node, av: a.data.clone(), r, c }))
    }

    /// Concatenate 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of nothing".into()));
        }
        if axis > 1 {
            return Err(Error::Dimension(format!("concat axis {axis} on 2-D tensors")));
        }
        let dims: Vec<(usize, usize)> = parts.iter().map(|p| p.dims2("concat")).collect::<Result<_>>()?;
        let other = |d: (usize, usize)| if axis == 0 { d.1 } else { d.0 };
        if dims.iter().any(|d| other(*d) != other(dims[0])) {
            return Err(Error::Dimension(format!("concat axis {axis}: mismatched shapes {dims:?}")));
        }
        let saved: Vec<(Slot, Buf, usize)> = parts
            .iter()
            .zip(&dims)
            .map(|(p, d)| (p.node, p.data.clone(), if axis == 0 { d.0 } else { d.1 }))
            .collect();
        let (rows, cols) = if axis == 0 {
            (dims.iter().map(|d| d.0).sum(), dims[0].1)
        } else {
            (dims[0].0, dims.iter().map(|d| d.1).sum())
        };
        let v = kernel_concat(&saved, axis, rows, cols);
        Ok(self.push(vec![rows, cols], v, Op::Concat { parts: saved, axis, rows, cols }))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let (rows, cols) = a.dims2("slice")?;
        let extent = if axis == 0 { rows } else if axis == 1 { cols } else { 0 };
        if axis > 1 || start + len > extent {
            return Err(Error::Dimension(format!(
                "slice axis {axis} [{start}, {}) of shape {:?}",
                start + len,
                a.shape
            )));
        }
        let v = kernel_slice(&a.data, axis, start, len, rows, cols);
        let shape = if axis == 0 { vec![len, cols] } else { vec![rows, len] };
        Ok(self.push(shape, v, Op::Slice { a: a.node, av: a.data.clone(), axis, start, len, rows, cols }))
    }

    /// Row gather from a `[V×d]` table (embedding lookup).
    pub fn gather_rows(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, cols) = table.dims2("gather")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Input(format!("index {bad} out of range for table of {v} rows")));
        }
        let out = kernel_gather(&table.data, ids, cols);
        let op = Op::Gather { table: table.node, tv: table.data.clone(), ids: ids.to_vec(), cols };
        Ok(self.push(vec![ids.len(), cols], out, op))
    }

    pub fn sum(&mut self, a: &Tensor) -> Tensor {
        let s = a.data.iter().sum();
        self.push(vec![], vec![s], Op::Sum { a: a.node, av: a.data.clone() })
    }

    pub fn mean(&mut self, a: &Tensor) -> Result<Tensor> {
        if a.is_empty() {
            return Err(Error::Dimension("mean of empty tensor".into()));
        }
        let s = a.data.iter().sum::<f64>() / a.len() as f64;
        Ok(self.push(vec![], vec![s], Op::Mean { a: a.node, av: a.data.clone() }))
    }

    /// Row-wise softmax over the last axis with an optional additive constant mask.
    pub fn softmax_last(&mut self, a: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (rows, cols) = a.dims2("softmax")?;
        if let Some(m) = mask {
            if m.shape != a.shape {
                return Err(Error::Dimension(format!("mask {:?} vs scores {:?}", m.shape, a.shape)));
            }
        }
        let mv = mask.map(|m| m.data.clone());
        let v = kernel_softmax(&a.data, mv.as_deref().map(Vec::as_slice), rows, cols)?;
        Ok(self.push(a.shape.clone(), v, Op::Softmax { a: a.node, av: a.data.clone(), mask: mv, rows, cols }))
    }

    /// Mean cross-entropy of row-wise logits against integer targets.
    pub fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (rows, cols) = logits.dims2("cross_entropy")?;
        if targets.len() != rows || rows == 0 {
            return Err(Error::Dimension(format!("{} targets for {rows} logit rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::Input(format!("target {bad} out of range for {cols} classes")));
        }
        let (loss, probs) = kernel_cross_entropy(&logits.data, targets, rows, cols);
        let op = Op::CrossEntropy {
            a: logits.node,
            av: logits.data.clone(),
            targets: targets.to_vec(),
            probs: Arc::new(probs),
            rows,
            cols,
        };
        Ok(self.push(vec![], vec![loss], op))
    }

    /// Row-wise RMS normalisation with a learned gain vector.
    pub fn rms_norm(&mut self, x: &Tensor, gain: &Tensor) -> Result<Tensor> {
        let (rows, cols) = x.dims2("rms_norm")?;
        if gain.len() != cols {
            return Err(Error::Dimension(format!("gain of {} for {cols} columns", gain.len())));
        }
        let (v, inv) = kernel_rms_norm(&x.data, &gain.data, rows, cols);
        let op = Op::RmsNorm { x: x.node, g: gain.node, xv: x.data.clone(), gv: gain.data.clone(), inv, rows, cols };
        Ok(self.push(x.shape.clone(), v, op))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: &Tensor) -> Tensor {
        let v = a.data.iter().map(|&x| gelu(x)).collect();
        self.push(a.shape.clone(), v, Op::Gelu { a: a.node, av: a.data.clone() })
    }

    /// Rotary embedding of each row at its absolute position.
    pub fn rope(&mut self, a: &Tensor, positions: &[usize], base: f64) -> Result<Tensor> {
        let (rows, cols) = a.dims2("rope")?;
        if cols % 2 != 0 {
            return Err(Error::Config(format!("rotary embedding needs an even width, got {cols}")));
        }
        if positions.len() != rows {
            return Err(Error::Dimension(format!("{} positions for {rows} rows", positions.len())));
        }
        let v = kernel_rope(&a.data, positions, base, cols, false);
        let op = Op::Rope { a: a.node, av: a.data.clone(), positions: positions.to_vec(), base, cols };
        Ok(self.push(a.shape.clone(), v, op))
    }

    // ---- backward --------------------------------------------------------

    /// Gradient of a scalar loss with respect to every reachable node.
    pub fn backward(&self, loss: &Tensor) -> Result<GradientMap> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", loss.shape)));
        }
        self.backward_seeded(&[(loss, &[1.0])])
    }

    /// Vector-Jacobian product: propagate the given output cotangents back
    /// through the tape. Seeds on constants are ignored.
    pub fn backward_seeded(&self, seeds: &[(&Tensor, &[f64])]) -> Result<GradientMap> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (t, g) in seeds {
            if g.len() != t.len() {
                return Err(Error::Dimension(format!("seed of {} for tensor of {}", g.len(), t.len())));
            }
            if let Some(id) = t.node {
                if id >= self.nodes.len() {
                    return Err(Error::Contract(format!("node {id} is not on this tape")));
                }
                acc(&mut grads, Some(id), g.len(), |dst| dst.iter_mut().zip(g.iter()).for_each(|(d, s)| *d += s));
                top = top.max(id + 1);
            }
        }
        for id in (0..top).rev() {
            let Some(gout) = grads[id].take() else { continue };
            self.backprop_node(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(GradientMap { grads })
    }

    fn backprop_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf { .. } => {}
            Op::Add { a, b, .. } => {
                acc(grads, *a, g.len(), |d| add_into(d, g));
                acc(grads, *b, g.len(), |d| add_into(d, g));
            }
            Op::Scale { a, s, .. } => acc(grads, *a, g.len(), |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += g * s);
            }),
            Op::Mul { a, b, av, bv } => {
                acc(grads, *a, g.len(), |d| {
                    d.iter_mut().zip(g.iter().zip(bv.iter())).for_each(|(d, (g, y))| *d += g * y);
                });
                acc(grads, *b, g.len(), |d| {
                    d.iter_mut().zip(g.iter().zip(av.iter())).for_each(|(d, (g, x))| *d += g * x);
                });
            }
            Op::MatMul { a, b, av, bv, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                // dA = G Bᵀ, dB = Aᵀ G
                acc(grads, *a, m * k, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bv[p * n + j];
                            }
                            d[i * k + p] += s;
                        }
                    }
                });
                acc(grads, *b, k * n, |d| {
                    for i in 0..m {
                        for p in 0..k {
                            let x = av[i * k + p];
                            for j in 0..n {
                                d[p * n + j] += x * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, r, c, .. } => {
                let gt = kernel_transpose(g, *c, *r);
                acc(grads, *a, r * c, |d| add_into(d, &gt));
            }
            Op::Concat { parts, axis, rows, cols } => {
                let mut offset = 0;
                for (slot, _, extent) in parts {
                    let len = *extent;
                    let piece = kernel_slice(g, *axis, offset, len, *rows, *cols);
                    acc(grads, *slot, piece.len(), |d| add_into(d, &piece));
                    offset += len;
                }
            }
            Op::Slice { a, axis, start, len, rows, cols, .. } => acc(grads, *a, rows * cols, |d| {
                if *axis == 0 {
                    let dst = &mut d[start * cols..(start + len) * cols];
                    add_into(dst, g);
                } else {
                    for r in 0..*rows {
                        for j in 0..*len {
                            d[r * cols + start + j] += g[r * len + j];
                        }
                    }
                }
            }),
            Op::Gather { table, tv, ids, cols } => acc(grads, *table, tv.len(), |d| {
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut d[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }),
            Op::Sum { a, av } => acc(grads, *a, av.len(), |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean { a, av } => {
                let s = g[0] / av.len() as f64;
                acc(grads, *a, av.len(), |d| d.iter_mut().for_each(|d| *d += s));
            }
            Op::Softmax { a, rows, cols, .. } => {
                let y = &self.nodes[id].value;
                acc(grads, *a, rows * cols, |d| {
                    for r in 0..*rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..*cols {
                            d[r * cols + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::CrossEntropy { a, targets, probs, rows, cols, .. } => {
                let s = g[0] / *rows as f64;
                acc(grads, *a, rows * cols, |d| {
                    for r in 0..*rows {
                        for j in 0..*cols {
                            let onehot = if targets[r] == j { 1.0 } else { 0.0 };
                            d[r * cols + j] += s * (probs[r * cols + j] - onehot);
                        }
                    }
                });
            }
            Op::RmsNorm { x, g: gain, xv, gv, inv, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                acc(grads, *x, rows * cols, |d| {
                    for r in 0..rows {
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let ir = inv[r];
                        let dot: f64 = (0..cols).map(|j| gr[j] * gv[j] * xr[j]).sum();
                        let k = ir * ir * ir * dot / cols as f64;
                        for j in 0..cols {
                            d[r * cols + j] += gr[j] * gv[j] * ir - xr[j] * k;
                        }
                    }
                });
                acc(grads, *gain, cols, |d| {
                    for r in 0..rows {
                        for j in 0..cols {
                            d[j] += g[r * cols + j] * xv[r * cols + j] * inv[r];
                        }
                    }
                });
            }
            Op::Gelu { a, av } => acc(grads, *a, av.len(), |d| {
                d.iter_mut().zip(g.iter().zip(av.iter())).for_each(|(d, (g, &x))| *d += g * gelu_grad(x));
            }),
            Op::Rope { a, positions, base, cols, .. } => {
                let back = kernel_rope(g, positions, *base, *cols, true);
                acc(grads, *a, back.len(), |d| add_into(d, &back));
            }
        }
    }
}

/// Identity in forward, no gradient in backward.
///
/// The result shares storage with `a` and carries no tape node, so nothing
/// downstream can reach `a`'s subgraph.
pub fn stop_gradient(a: &Tensor) -> Tensor {
    a.detached()
}

/// Central finite differences `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` per coordinate.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut out = vec![0.0; x.len()];
    let mut probe = x.detached();
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape.clone(), out)
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!("{what}: {:?} vs {:?}", a.shape, b.shape)));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn bits_eq(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn replay_op(op: &Op) -> Result<Option<Vec<f64>>> {
    Ok(Some(match op {
        Op::Leaf { .. } => return Ok(None),
        Op::Add { av, bv, .. } => av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect(),
        Op::Scale { av, s, .. } => av.iter().map(|x| x * s).collect(),
        Op::Mul { av, bv, .. } => av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect(),
        Op::MatMul { av, bv, m, k, n, .. } => kernel_matmul(av, bv, *m, *k, *n),
        Op::Transpose { av, r, c, .. } => kernel_transpose(av, *r, *c),
        Op::Concat { parts, axis, rows, cols } => kernel_concat(parts, *axis, *rows, *cols),
        Op::Slice { av, axis, start, len, rows, cols, .. } => kernel_slice(av, *axis, *start, *len, *rows, *cols),
        Op::Gather { tv, ids, cols, .. } => kernel_gather(tv, ids, *cols),
        Op::Sum { av, .. } => vec![av.iter().sum()],
        Op::Mean { av, .. } => vec![av.iter().sum::<f64>() / av.len() as f64],
        Op::Softmax { av, mask, rows, cols, .. } => kernel_softmax(av, mask.as_deref().map(Vec::as_slice), *rows, *cols)?,
        Op::CrossEntropy { av, targets, rows, cols, .. } => vec![kernel_cross_entropy(av, targets, *rows, *cols).0],
        Op::RmsNorm { xv, gv, rows, cols, .. } => kernel_rms_norm(xv, gv, *rows, *cols).0,
        Op::Gelu { av, .. } => av.iter().map(|&x| gelu(x)).collect(),
        Op::Rope { av, positions, base, cols, .. } => kernel_rope(av, positions, *base, *cols, false),
    }))
}

// ---- kernels -----------------------------------------------------------------

fn kernel_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, y) in row.iter_mut().zip(brow) {
                *o += x * y;
            }
        }
    }
    out
}

fn kernel_transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn kernel_concat(parts: &[(Slot, Buf, usize)], axis: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    if axis == 0 {
        for (_, buf, _) in parts {
            out.extend_from_slice(buf);
        }
    } else {
        for r in 0..rows {
            for (_, buf, w) in parts {
                out.extend_from_slice(&buf[r * w..(r + 1) * w]);
            }
        }
    }
    out
}

fn kernel_slice(a: &[f64], axis: usize, start: usize, len: usize, rows: usize, cols: usize) -> Vec<f64> {
    if axis == 0 {
        a[start * cols..(start + len) * cols].to_vec()
    } else {
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&a[r * cols + start..r * cols + start + len]);
        }
        out
    }
}

fn kernel_gather(table: &[f64], ids: &[usize], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(ids.len() * cols);
    for &i in ids {
        out.extend_from_slice(&table[i * cols..(i + 1) * cols]);
    }
    out
}

fn kernel_softmax(a: &[f64], mask: Option<&[f64]>, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = &a[r * cols..(r + 1) * cols];
        let dst = &mut out[r * cols..(r + 1) * cols];
        let mrow = mask.map(|m| &m[r * cols..(r + 1) * cols]);
        if let Some(m) = mrow {
            if m.iter().all(|&v| v <= MASKED * 0.5) {
                return Err(Error::DegenerateRow { row: r });
            }
        }
        let logit = |j: usize| src[j] + mrow.map_or(0.0, |m| m[j]);
        let mx = (0..cols).map(logit).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, d) in dst.iter_mut().enumerate() {
            let blocked = mrow.is_some_and(|m| m[j] <= MASKED * 0.5);
            *d = if blocked { 0.0 } else { (logit(j) - mx).exp() };
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    Ok(out)
}

fn kernel_cross_entropy(a: &[f64], targets: &[usize], rows: usize, cols: usize) -> (f64, Vec<f64>) {
    let mut probs = vec![0.0; rows * cols];
    let mut total = 0.0;
    for r in 0..rows {
        let row = &a[r * cols..(r + 1) * cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        let lse = mx + z.ln();
        total += lse - row[targets[r]];
        for j in 0..cols {
            probs[r * cols + j] = (row[j] - lse).exp();
        }
    }
    (total / rows as f64, probs)
}

fn kernel_rms_norm(x: &[f64], g: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; rows * cols];
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        let ir = 1.0 / (ms + RMS_EPS).sqrt();
        inv[r] = ir;
        for j in 0..cols {
            out[r * cols + j] = xr[j] * ir * g[j];
        }
    }
    (out, inv)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Rotate interleaved pairs `(2i, 2i+1)` of each row by `pos · base^(-2i/d)`.
/// `inverse` rotates by the negated angle (the transpose, used in backward).
fn kernel_rope(a: &[f64], positions: &[usize], base: f64, cols: usize, inverse: bool) -> Vec<f64> {
    let half = cols / 2;
    let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / cols as f64)).collect();
    let mut out = vec![0.0; a.len()];
    for (r, &p) in positions.iter().enumerate() {
        for (i, f) in freqs.iter().enumerate() {
            let angle = p as f64 * f;
            let (s, c) = angle.sin_cos();
            let s = if inverse { -s } else { s };
            let x0 = a[r * cols + 2 * i];
            let x1 = a[r * cols + 2 * i + 1];
            out[r * cols + 2 * i] = x0 * c - x1 * s;
            out[r * cols + 2 * i + 1] = x0 * s + x1 * c;
        }
    }
    out
}
