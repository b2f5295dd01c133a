//! Closed-form attention cost: effective context, peak visible KV, attention
//! multiply-accumulates and pool growth. Everything is exact rational
//! arithmetic so it can be compared to the runtime counters with zero slack.

use num_rational::Ratio;

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub type Q = Ratio<u64>;

#[derive(Clone, Debug, PartialEq)]
pub struct CostInputs {
    /// total tokens
    pub t: u64,
    pub s: u64,
    pub m: u64,
    pub r: u64,
    /// share of local heads
    pub alpha: Q,
    /// share of long-range layers
    pub beta: Q,
    pub layers: u64,
    pub heads: u64,
    pub head_dim: u64,
}

impl CostInputs {
    #[allow(clippy::too_many_arguments)]
    pub fn new(t: u64, s: u64, m: u64, r: u64, alpha: Q, beta: Q, layers: u64, heads: u64, head_dim: u64) -> Result<Self> {
        let one = Q::from_integer(1);
        if alpha > one || beta > one {
            return Err(Error::Config(format!("alpha {alpha} and beta {beta} must lie in [0, 1]")));
        }
        if layers == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::Config("layers, heads and head dim must be positive".into()));
        }
        Ok(Self { t, s, m, r, alpha, beta, layers, heads, head_dim })
    }

    pub fn from_config(cfg: &ModelConfig, t: u64) -> Self {
        let p = &cfg.partition;
        Self {
            t,
            s: cfg.segment_len as u64,
            m: cfg.carry_len as u64,
            r: cfg.prefix_len as u64,
            alpha: Q::new(p.local_heads.len() as u64, p.heads as u64),
            beta: Q::new(p.long_layers.len() as u64, p.layers as u64),
            layers: cfg.layers as u64,
            heads: cfg.heads as u64,
            head_dim: cfg.head_dim() as u64,
        }
    }
}

/// `S + αM + β(1-α)R`.
pub fn effective_context(c: &CostInputs) -> Q {
    let one = Q::from_integer(1);
    Q::from_integer(c.s) + c.alpha * c.m + c.beta * (one - c.alpha) * c.r
}

/// Peak attention-visible key rows per head class.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakKv {
    /// local heads, every layer
    pub local: u64,
    /// long-range heads in long-range layers
    pub long_enabled: u64,
    /// long-range heads elsewhere
    pub long_other: u64,
    /// head- and layer-weighted mean
    pub mean: Q,
}

pub fn peak_kv_len(c: &CostInputs) -> PeakKv {
    let one = Q::from_integer(1);
    let local = c.s + c.m;
    let long_enabled = c.s + c.r;
    let long_other = c.s;
    let long_mean = c.beta * long_enabled + (one - c.beta) * long_other;
    let mean = c.alpha * local + (one - c.alpha) * long_mean;
    PeakKv { local, long_enabled, long_other, mean }
}

/// `2 · T · eff · d_head · L · H` attention multiply-accumulates.
pub fn attention_time_estimate(c: &CostInputs) -> Q {
    effective_context(c) * (2 * c.t * c.head_dim * c.layers * c.heads)
}

/// `|long layers| · |long heads| · T` pooled rows.
pub fn pool_growth(c: &CostInputs, t: u64) -> Q {
    let one = Q::from_integer(1);
    c.beta * c.layers * ((one - c.alpha) * c.heads) * t
}

/// Attention multiply-accumulates of the actual segment schedule for `t`
/// tokens: the steady-state model per segment, with the prefixes each segment
/// really sees (no carry or prefix on the first segment, prefixes clipped to
/// what the pool holds, a short final segment).
pub fn schedule_macs(cfg: &ModelConfig, t: usize) -> u64 {
    let p = &cfg.partition;
    let dh = cfg.head_dim() as u64;
    let s = cfg.segment_len;
    let lag = cfg.retrieval.pool_lag;
    let mut total = 0u64;
    let mut prev_len = 0usize;
    let mut lens = Vec::new();
    let mut start = 0;
    while start < t {
        let m = s.min(t - start);
        let pooled: usize = lens.iter().rev().skip(lag).sum();
        let carried = cfg.carry_len.min(prev_len);
        let retrieved = if lens.is_empty() { 0 } else { cfg.prefix_len.min(pooled) };
        for l in 0..cfg.layers {
            for h in 0..cfg.heads {
                let prefix = if p.is_local(h) {
                    carried
                } else if p.is_long_layer(l) {
                    retrieved
                } else {
                    0
                };
                total += 2 * (m as u64) * ((m + prefix) as u64) * dh;
            }
        }
        lens.push(m);
        prev_len = m;
        start += m;
    }
    total
}

/// Format an exact rational for reports: integers plain, otherwise `p/q`.
pub fn fmt_q(q: &Q) -> String {
    if q.is_integer() {
        q.to_integer().to_string()
    } else {
        format!("{}/{}", q.numer(), q.denom())
    }
}
