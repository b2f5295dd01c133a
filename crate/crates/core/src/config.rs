//! Model and execution configuration, with the named presets and the
//! key = value text format used for experiment records.

use serde::{Deserialize, Serialize};

use crate::attention::HeadPartition;
use crate::error::{Error, Result};

/// Knobs of the top-k retrieval operator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// top-k per query summary
    pub top_k: usize,
    /// half-width of the window expanded around each anchor
    pub offset_window: usize,
    /// width (and stride) of the sliding mean over tail queries
    pub query_window: usize,
    /// rows in the trailing mean
    pub query_tail: usize,
    /// number of tail query rows summarised (L_q)
    pub query_rows: usize,
    /// Segments between producing KV and it becoming retrievable.
    /// 0: segment i may retrieve segment i-1's KV; 1: only segments <= i-2.
    pub pool_lag: usize,
}

impl RetrievalConfig {
    pub fn desk() -> Self {
        Self { top_k: 4, offset_window: 1, query_window: 2, query_tail: 2, query_rows: 4, pool_lag: 0 }
    }

    pub fn paper() -> Self {
        Self { top_k: 16, offset_window: 4, query_window: 8, query_tail: 8, query_rows: 32, pool_lag: 0 }
    }

    /// Anchors kept after top-k: enough windows to fill `prefix_len` rows.
    pub fn anchors(&self, prefix_len: usize) -> usize {
        prefix_len.div_ceil(2 * self.offset_window + 1).max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// S
    pub segment_len: usize,
    /// M
    pub carry_len: usize,
    /// R
    pub prefix_len: usize,
    /// K
    pub truncation: usize,
    pub init_std: f64,
    pub seed: u64,
    pub partition: HeadPartition,
    pub retrieval: RetrievalConfig,
}

impl ModelConfig {
    /// Laptop-scale default.
    pub fn desk() -> Self {
        Self {
            layers: 4,
            heads: 4,
            d_model: 32,
            d_ff: 64,
            vocab: 64,
            segment_len: 8,
            carry_len: 4,
            prefix_len: 4,
            truncation: 1,
            init_std: 0.02,
            seed: 0,
            partition: HeadPartition::new(4, 4, vec![2, 3], vec![0, 1], vec![1, 3]).expect("desk partition"),
            retrieval: RetrievalConfig::desk(),
        }
    }

    /// Full-size layout: 32 layers × 32 heads, 16 long-range heads, 4 long-range layers.
    pub fn paper() -> Self {
        let long_heads = vec![0, 1, 2, 4, 9, 12, 14, 15, 16, 18, 19, 22, 23, 26, 29, 30];
        let local_heads = (0..32).filter(|h| !long_heads.contains(h)).collect();
        Self {
            layers: 32,
            heads: 32,
            d_model: 4096,
            d_ff: 11008,
            vocab: 32000,
            segment_len: 4096,
            carry_len: 512,
            prefix_len: 512,
            truncation: 1,
            init_std: 0.02,
            seed: 0,
            partition: HeadPartition::new(32, 32, local_heads, long_heads, vec![6, 8, 11, 18]).expect("paper partition"),
            retrieval: RetrievalConfig::paper(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown model preset '{other}'"))),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Check every invariant, each with its own message.
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.vocab == 0 || self.d_ff == 0 {
            return Err(Error::Config("layers, heads, d_model, d_ff and vocab must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config(format!("head dim {} must be even for rotary embedding", self.head_dim())));
        }
        if self.segment_len == 0 {
            return Err(Error::Config("segment length S must be positive".into()));
        }
        if self.segment_len < self.carry_len {
            return Err(Error::Config(format!(
                "segment length S={} is shorter than carry length M={}",
                self.segment_len, self.carry_len
            )));
        }
        if self.partition.heads != self.heads || self.partition.layers != self.layers {
            return Err(Error::Partition(format!(
                "partition is for {} heads × {} layers, model has {} × {}",
                self.partition.heads, self.partition.layers, self.heads, self.layers
            )));
        }
        self.partition.validate()?;
        let r = &self.retrieval;
        if r.top_k == 0 || r.query_window == 0 || r.query_tail == 0 || r.query_rows == 0 {
            return Err(Error::Config("retrieval top_k, query_window, query_tail and query_rows must be positive".into()));
        }
        if r.pool_lag > 1 {
            return Err(Error::Config(format!("pool_lag must be 0 or 1, got {}", r.pool_lag)));
        }
        Ok(())
    }

    /// Canonical text form (stable key order).
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Same config with retrieval switched off (no long-range layers).
    pub fn without_retrieval(&self) -> Self {
        let mut c = self.clone();
        c.partition.long_layers.clear();
        c
    }
}
