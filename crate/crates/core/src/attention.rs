//! Per-head attention contexts: which prefix a head sees, how positions are
//! assigned when a prefix is concatenated, and the masked attention itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, MASKED};

pub const ROPE_BASE: f64 = 10000.0;

/// Disjoint split of each layer's heads into local and long-range groups,
/// plus the set of layers whose long-range heads read the retrieval prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadPartition {
    pub heads: usize,
    pub layers: usize,
    pub local_heads: Vec<usize>,
    pub long_heads: Vec<usize>,
    pub long_layers: Vec<usize>,
}

impl HeadPartition {
    /// Validate and normalise (sort) the index sets.
    pub fn new(
        heads: usize,
        layers: usize,
        mut local_heads: Vec<usize>,
        mut long_heads: Vec<usize>,
        mut long_layers: Vec<usize>,
    ) -> Result<Self> {
        local_heads.sort_unstable();
        long_heads.sort_unstable();
        long_layers.sort_unstable();
        let p = Self { heads, layers, local_heads, long_heads, long_layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        for set in [&self.local_heads, &self.long_heads] {
            if let Some(h) = set.iter().find(|&&h| h >= self.heads) {
                return Err(Error::Partition(format!("head index {h} out of range for {} heads", self.heads)));
            }
            if set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Partition(format!("head set {set:?} must be sorted without repeats")));
            }
        }
        if let Some(h) = self.local_heads.iter().find(|h| self.long_heads.contains(h)) {
            return Err(Error::Partition(format!("head {h} is in both the local and long-range groups")));
        }
        if self.local_heads.len() + self.long_heads.len() != self.heads {
            return Err(Error::Partition(format!(
                "local and long-range heads must cover all {} heads, got {} + {}",
                self.heads,
                self.local_heads.len(),
                self.long_heads.len()
            )));
        }
        if let Some(l) = self.long_layers.iter().find(|&&l| l >= self.layers) {
            return Err(Error::Partition(format!("long-range layer {l} out of range for {} layers", self.layers)));
        }
        if self.long_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Partition("long-range layers must be sorted without repeats".into()));
        }
        Ok(())
    }

    pub fn is_local(&self, head: usize) -> bool {
        self.local_heads.binary_search(&head).is_ok()
    }

    pub fn is_long(&self, head: usize) -> bool {
        self.long_heads.binary_search(&head).is_ok()
    }

    pub fn is_long_layer(&self, layer: usize) -> bool {
        self.long_layers.binary_search(&layer).is_ok()
    }

    /// |local| / H
    pub fn alpha(&self) -> f64 {
        self.local_heads.len() as f64 / self.heads as f64
    }

    /// |long layers| / L
    pub fn beta(&self) -> f64 {
        self.long_layers.len() as f64 / self.layers as f64
    }

    /// `(layer, head)` pairs that feed the retrieval pool.
    pub fn pool_slots(&self) -> Vec<(usize, usize)> {
        self.long_layers.iter().flat_map(|&l| self.long_heads.iter().map(move |&h| (l, h))).collect()
    }

    /// `(layer, head)` pairs that produce the carried tail.
    pub fn carry_slots(&self) -> Vec<(usize, usize)> {
        (0..self.layers).flat_map(|l| self.local_heads.iter().map(move |&h| (l, h))).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrefixKind {
    Carried,
    Retrieved,
}

/// Prefix keys (un-rotated) and values for one head.
#[derive(Clone, Debug)]
pub struct PrefixKv {
    pub keys: Tensor,
    pub values: Tensor,
    pub kind: PrefixKind,
}

impl PrefixKv {
    pub fn new(keys: Tensor, values: Tensor, kind: PrefixKind) -> Result<Self> {
        if keys.shape().len() != 2 || keys.shape() != values.shape() {
            return Err(Error::Dimension(format!(
                "prefix keys {:?} and values {:?} must be matching 2-D",
                keys.shape(),
                values.shape()
            )));
        }
        Ok(Self { keys, values, kind })
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Which branch of the context rule a head took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextCase {
    /// Local head: carried tail, then the segment.
    Carried,
    /// Long-range head in a long-range layer: retrieved prefix, then the segment.
    Retrieved,
    /// Long-range head elsewhere: the segment only.
    WithinOnly,
}

/// Concatenated context for one head; keys are still un-rotated.
#[derive(Clone, Debug)]
pub struct Context {
    pub keys: Tensor,
    pub values: Tensor,
    pub prefix_len: usize,
    pub case: ContextCase,
}

/// Positions `{0..P-1}` for the prefix and `{P..P+m-1}` for the segment.
pub fn assign_positions(prefix_len: usize, segment_len: usize) -> (Vec<usize>, Vec<usize>) {
    let prefix = (0..prefix_len).collect();
    let segment = (prefix_len..prefix_len + segment_len).collect();
    (prefix, segment)
}

/// Rotary embedding at explicit absolute positions.
pub fn rope_rotate(tape: &mut Tape, x: &Tensor, positions: &[usize]) -> Result<Tensor> {
    tape.rope(x, positions, ROPE_BASE)
}

/// Additive `[m × (P+m)]` mask: row `t` sees every prefix column and
/// segment columns up to and including itself.
pub fn causal_prefix_mask(prefix_len: usize, segment_len: usize) -> Tensor {
    let cols = prefix_len + segment_len;
    let mut data = vec![0.0; segment_len * cols];
    for t in 0..segment_len {
        for j in prefix_len + t + 1..cols {
            data[t * cols + j] = MASKED;
        }
    }
    Tensor::new(vec![segment_len, cols], data).expect("mask shape")
}

/// Select the context for `(layer, head)`.
///
/// `carried` is only valid for local heads and `retrieved` only for long-range
/// heads in long-range layers; either may be absent or empty, which yields a
/// zero-length prefix.
#[allow(clippy::too_many_arguments)]
pub fn build_context(
    tape: &mut Tape,
    layer: usize,
    head: usize,
    within_keys: &Tensor,
    within_values: &Tensor,
    carried: Option<&PrefixKv>,
    retrieved: Option<&PrefixKv>,
    partition: &HeadPartition,
) -> Result<Context> {
    let (case, prefix) = if partition.is_local(head) {
        if retrieved.is_some() {
            return Err(Error::Contract(format!("local head {head} was given a retrieved prefix")));
        }
        (ContextCase::Carried, carried)
    } else if partition.is_long(head) {
        if carried.is_some() {
            return Err(Error::Contract(format!("long-range head {head} was given a carried prefix")));
        }
        if partition.is_long_layer(layer) {
            (ContextCase::Retrieved, retrieved)
        } else {
            if retrieved.is_some() {
                return Err(Error::Contract(format!("layer {layer} does not consume retrieval")));
            }
            (ContextCase::WithinOnly, None)
        }
    } else {
        return Err(Error::Partition(format!("head {head} is in neither group")));
    };
    match prefix.filter(|p| !p.is_empty()) {
        Some(p) => {
            let keys = tape.concat(&[&p.keys, within_keys], 0)?;
            let values = tape.concat(&[&p.values, within_values], 0)?;
            Ok(Context { keys, values, prefix_len: p.len(), case })
        }
        None => Ok(Context { keys: within_keys.clone(), values: within_values.clone(), prefix_len: 0, case }),
    }
}

/// `softmax(Q Kᵀ / √d + mask) V`. Inputs are expected to be rotated already.
pub fn attend(tape: &mut Tape, q: &Tensor, k_ctx: &Tensor, v_ctx: &Tensor, mask: &Tensor) -> Result<Tensor> {
    let d = q.cols();
    if k_ctx.cols() != d || v_ctx.rows() != k_ctx.rows() {
        return Err(Error::Dimension(format!(
            "attend: q {:?}, k {:?}, v {:?}",
            q.shape(),
            k_ctx.shape(),
            v_ctx.shape()
        )));
    }
    let kt = tape.transpose(k_ctx)?;
    let scores = tape.matmul(q, &kt)?;
    let scaled = tape.scale(&scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_last(&scaled, Some(mask))?;
    tape.matmul(&weights, v_ctx)
}

/// Rotate and attend one head over a built context; returns the head output.
pub fn attend_context(tape: &mut Tape, q: &Tensor, ctx: &Context) -> Result<Tensor> {
    let m = q.rows();
    let (_, seg_pos) = assign_positions(ctx.prefix_len, m);
    let all_pos: Vec<usize> = (0..ctx.prefix_len + m).collect();
    let q_rot = rope_rotate(tape, q, &seg_pos)?;
    let k_rot = rope_rotate(tape, &ctx.keys, &all_pos)?;
    let mask = causal_prefix_mask(ctx.prefix_len, m);
    attend(tape, &q_rot, &k_rot, &ctx.values, &mask)
}
