//! The carried KV tail: the only differentiable state crossing a segment boundary.

use std::collections::BTreeMap;

use crate::attention::{HeadPartition, PrefixKind, PrefixKv};
use crate::error::{Error, Result};
use crate::tensor::{stop_gradient, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct CarriedState {
    tail_len: usize,
    segment_index: usize,
    differentiable: bool,
    entries: BTreeMap<(usize, usize), PrefixKv>,
}

impl CarriedState {
    /// `C_0`: zero-length tails for every `(layer, local head)`.
    pub fn init_empty(partition: &HeadPartition, tail_len: usize, head_dim: usize) -> Self {
        let entries = partition
            .carry_slots()
            .into_iter()
            .map(|slot| {
                let kv = PrefixKv {
                    keys: Tensor::zeros(vec![0, head_dim]),
                    values: Tensor::zeros(vec![0, head_dim]),
                    kind: PrefixKind::Carried,
                };
                (slot, kv)
            })
            .collect();
        Self { tail_len, segment_index: 0, differentiable: true, entries }
    }

    /// Keep the trailing `min(M, m)` rows of each local head's un-rotated
    /// keys and values. The slices stay attached to `tape`.
    pub fn extract(
        tape: &mut Tape,
        segment_kv: &BTreeMap<(usize, usize), (Tensor, Tensor)>,
        partition: &HeadPartition,
        tail_len: usize,
        segment_index: usize,
    ) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for slot in partition.carry_slots() {
            let (k, v) = segment_kv
                .get(&slot)
                .ok_or_else(|| Error::Contract(format!("no segment KV for local slot {slot:?}")))?;
            let m = k.rows();
            let keep = tail_len.min(m);
            let keys = tape.slice(k, 0, m - keep, keep)?;
            let values = tape.slice(v, 0, m - keep, keep)?;
            entries.insert(slot, PrefixKv::new(keys, values, PrefixKind::Carried)?);
        }
        let differentiable = tape.is_recording();
        Ok(Self { tail_len, segment_index, differentiable, entries })
    }

    /// `sg(C)`: identical values, no gradient path to the producer.
    pub fn detach(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(slot, kv)| {
                let d = PrefixKv { keys: stop_gradient(&kv.keys), values: stop_gradient(&kv.values), kind: kv.kind };
                (*slot, d)
            })
            .collect();
        Self { tail_len: self.tail_len, segment_index: self.segment_index, differentiable: false, entries }
    }

    /// Register every tensor as a differentiable input leaf on `tape`.
    pub fn attach_inputs(&self, tape: &mut Tape) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(slot, kv)| {
                let a = PrefixKv { keys: tape.input(&kv.keys), values: tape.input(&kv.values), kind: kv.kind };
                (*slot, a)
            })
            .collect();
        Self {
            tail_len: self.tail_len,
            segment_index: self.segment_index,
            differentiable: tape.is_recording(),
            entries,
        }
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&PrefixKv> {
        self.entries.get(&(layer, head))
    }

    pub fn slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub fn tail_len(&self) -> usize {
        self.tail_len
    }

    pub fn segment_index(&self) -> usize {
        self.segment_index
    }

    pub fn is_differentiable(&self) -> bool {
        self.differentiable
    }

    /// Rows currently held per head (identical across heads).
    pub fn len(&self) -> usize {
        self.entries.values().next().map_or(0, PrefixKv::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensors in canonical order: for each slot, keys then values.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.entries.values().flat_map(|kv| [&kv.keys, &kv.values]).collect()
    }

    /// Vectorised state in the order of [`Self::tensors`].
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().into_iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn dim(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Split a flat vector back into per-tensor pieces matching [`Self::tensors`].
    pub fn split<'a>(&self, flat: &'a [f64]) -> Vec<&'a [f64]> {
        let mut out = Vec::new();
        let mut off = 0;
        for t in self.tensors() {
            out.push(&flat[off..off + t.len()]);
            off += t.len();
        }
        out
    }

    /// Bit-equality of every stored value.
    pub fn bits_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.flatten(), other.flatten());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    /// True when no tensor carries a tape node.
    pub fn is_constant(&self) -> bool {
        self.tensors().iter().all(|t| !t.is_attached())
    }
}
