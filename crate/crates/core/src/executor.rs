//! The segment loop: retrieve, run the shared forward operator, append to the
//! pool, hand the detached carry to the next segment.

use std::collections::BTreeMap;

use crate::carry::CarriedState;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{forward_segment, Mode, ModelParams, SegmentCounters, SegmentRun};
use crate::pool::{build_query_summary, retrieve, KvPool, RetrievedPrefix};
use crate::tensor::Tensor;

/// One segment of input ids with optional next-token targets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub inputs: Vec<usize>,
    pub targets: Option<Vec<usize>>,
}

/// Split a sample of `T + 1` tokens into `⌈T/S⌉` segments. Input `t` is
/// predicted as `sample[t + 1]`, so every segment has one target per input.
pub fn segment_sample(sample: &[usize], segment_len: usize) -> Result<Vec<Segment>> {
    if sample.len() < 2 {
        return Err(Error::Input(format!("a sample needs at least 2 tokens, got {}", sample.len())));
    }
    if segment_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let t = sample.len() - 1;
    Ok((0..t)
        .step_by(segment_len)
        .map(|lo| {
            let hi = (lo + segment_len).min(t);
            Segment { inputs: sample[lo..hi].to_vec(), targets: Some(sample[lo + 1..hi + 1].to_vec()) }
        })
        .collect())
}

/// Split input ids into segments without targets.
pub fn segment_inputs(tokens: &[usize], segment_len: usize) -> Result<Vec<Segment>> {
    if tokens.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if segment_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    Ok(tokens.chunks(segment_len).map(|c| Segment { inputs: c.to_vec(), targets: None }).collect())
}

/// Long-head KV of one segment, keyed by `(layer, head)`.
type SlotKv = BTreeMap<(usize, usize), (Tensor, Tensor)>;

/// State threaded between segments: pool, last tail queries, detached carry.
#[derive(Clone, Debug)]
pub struct SegmentChain {
    cfg: ModelConfig,
    pool: KvPool,
    pending: Option<(usize, usize, SlotKv)>,
    queries: BTreeMap<(usize, usize), Tensor>,
    carry: CarriedState,
    done: usize,
    position: usize,
}

impl SegmentChain {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            cfg: cfg.clone(),
            pool: KvPool::new(&cfg.partition, cfg.head_dim()),
            pending: None,
            queries: BTreeMap::new(),
            carry: CarriedState::init_empty(&cfg.partition, cfg.carry_len, cfg.head_dim()),
            done: 0,
            position: 0,
        }
    }

    /// 1-based index of the next segment to run.
    pub fn next_index(&self) -> usize {
        self.done + 1
    }

    /// Detached carry from the last absorbed segment (`C_0` at the start).
    pub fn carry(&self) -> &CarriedState {
        &self.carry
    }

    pub fn pool(&self) -> &KvPool {
        &self.pool
    }

    /// Flush any KV still held back by `pool_lag` and return the pool.
    pub fn finish(mut self) -> Result<KvPool> {
        if let Some((i, pos, kv)) = self.pending.take() {
            self.pool.append(i, pos, &kv)?;
        }
        Ok(self.pool)
    }

    /// Prefix for the next segment and the number of pool rows scored.
    pub fn prefix(&self) -> Result<(RetrievedPrefix, u64)> {
        if self.queries.is_empty() || self.cfg.prefix_len == 0 {
            return Ok((RetrievedPrefix::empty(), 0));
        }
        let mut summaries = BTreeMap::new();
        let mut reads = 0u64;
        for (slot, q) in &self.queries {
            reads += self.pool.rows(slot.0, slot.1) as u64;
            summaries.insert(*slot, build_query_summary(q, &self.cfg.retrieval));
        }
        Ok((retrieve(&self.pool, &summaries, &self.cfg.retrieval, self.cfg.prefix_len)?, reads))
    }

    /// Record a finished segment: pool append (respecting `pool_lag`), tail
    /// queries for the next retrieval, and the detached carry.
    pub fn absorb(&mut self, run: &SegmentRun) -> Result<()> {
        let index = self.next_index();
        let m = run.counters.tokens;
        if self.cfg.retrieval.pool_lag == 0 {
            self.pool.append(index, self.position, &run.pool_kv)?;
        } else {
            if let Some((i, pos, kv)) = self.pending.take() {
                self.pool.append(i, pos, &kv)?;
            }
            self.pending = Some((index, self.position, run.pool_kv.clone()));
        }
        self.queries = run.tail_queries.clone();
        self.carry = run.carry_out.detach();
        self.done = index;
        self.position += m;
        Ok(())
    }
}

/// Everything the reference forward chain produced.
#[derive(Clone, Debug)]
pub struct ChainTrace {
    /// Per-segment mean cross-entropy (empty when the segments have no targets).
    pub losses: Vec<f64>,
    pub logits: Vec<Tensor>,
    pub counters: Vec<SegmentCounters>,
    /// `C_0 .. C_N`, all detached.
    pub carries: Vec<CarriedState>,
    /// Prefix consumed by each segment (empty for the first).
    pub prefixes: Vec<RetrievedPrefix>,
    pub pool: KvPool,
}

impl ChainTrace {
    pub fn total_loss(&self) -> f64 {
        self.losses.iter().fold(0.0, |a, l| a + l)
    }

    pub fn mean_loss(&self) -> f64 {
        self.total_loss() / self.losses.len().max(1) as f64
    }

    /// Counters summed over all segments (kv_len keeps the per-head maximum).
    pub fn aggregate(&self) -> SegmentCounters {
        let mut out = SegmentCounters::default();
        for c in &self.counters {
            out.attn_macs += c.attn_macs;
            out.pool_reads += c.pool_reads;
            out.tokens += c.tokens;
            for (slot, &n) in &c.kv_len {
                let e = out.kv_len.entry(*slot).or_insert(0);
                *e = (*e).max(n);
            }
        }
        out
    }
}

/// Inference-mode segment loop over prepared segments. No tape records.
pub fn run_chain(params: &ModelParams, cfg: &ModelConfig, segments: &[Segment]) -> Result<ChainTrace> {
    let mut chain = SegmentChain::new(cfg);
    let mut trace = ChainTrace {
        losses: Vec::new(),
        logits: Vec::new(),
        counters: Vec::new(),
        carries: vec![chain.carry().clone()],
        prefixes: Vec::new(),
        pool: KvPool::new(&cfg.partition, cfg.head_dim()),
    };
    for seg in segments {
        let (prefix, reads) = chain.prefix()?;
        let i = chain.next_index();
        let (mut run, _) = forward_segment(
            params,
            cfg,
            &seg.inputs,
            seg.targets.as_deref(),
            chain.carry(),
            &prefix,
            i,
            Mode::Inference,
        )?;
        run.counters.pool_reads = reads;
        chain.absorb(&run)?;
        if let Some(l) = &run.loss {
            trace.losses.push(l.item());
        }
        trace.logits.push(run.logits);
        trace.counters.push(run.counters);
        trace.carries.push(chain.carry().clone());
        trace.prefixes.push(prefix);
    }
    trace.pool = chain.finish()?;
    Ok(trace)
}

/// Segment a `T + 1`-token sample and run the inference loop.
pub fn run_inference(params: &ModelParams, cfg: &ModelConfig, sample: &[usize]) -> Result<ChainTrace> {
    run_chain(params, cfg, &segment_sample(sample, cfg.segment_len)?)
}

/// Greedy decoding through the segment loop; ties go to the lower token id.
pub fn generate(params: &ModelParams, cfg: &ModelConfig, prompt: &[usize], n_new: usize) -> Result<Vec<usize>> {
    if n_new == 0 {
        return Err(Error::Input("n_new must be at least 1".into()));
    }
    let mut tokens = prompt.to_vec();
    let mut out = Vec::with_capacity(n_new);
    for _ in 0..n_new {
        let trace = run_chain(params, cfg, &segment_inputs(&tokens, cfg.segment_len)?)?;
        let last = trace.logits.last().expect("at least one segment");
        let next = argmax(last.row(last.rows() - 1));
        out.push(next);
        tokens.push(next);
    }
    Ok(out)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.init_std = 0.2;
        c
    }

    fn sample(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + 3) % 64).collect()
    }

    #[test]
    fn segmentation() {
        let segs = segment_sample(&sample(21), 8).unwrap();
        assert_eq!(segs.iter().map(|s| s.inputs.len()).collect::<Vec<_>>(), vec![8, 8, 4]);
        assert_eq!(segs[1].inputs[0], sample(21)[8]);
        assert_eq!(segs[1].targets.as_ref().unwrap()[0], sample(21)[9]);
        assert!(segment_sample(&[1], 8).is_err());
        assert_eq!(segment_inputs(&[1, 2, 3], 2).unwrap().len(), 2);
    }

    #[test]
    fn single_segment_never_reads_pool() {
        let c = cfg();
        let p = ModelParams::init(&c).unwrap();
        let t = run_inference(&p, &c, &sample(9)).unwrap();
        assert_eq!(t.losses.len(), 1);
        assert_eq!(t.counters[0].pool_reads, 0);
        assert!(t.prefixes[0].is_empty());
        assert!(t.carries[0].is_empty());
    }

    #[test]
    fn three_segment_unrolling() {
        let c = cfg();
        let p = ModelParams::init(&c).unwrap();
        let s = sample(25);
        let t = run_inference(&p, &c, &s).unwrap();
        assert_eq!(t.losses.len(), 3);
        assert_eq!(t.carries.len(), 4);
        // The chain is a fold of the single-segment operator.
        let segs = segment_sample(&s, 8).unwrap();
        let mut carry = CarriedState::init_empty(&c.partition, c.carry_len, c.head_dim());
        for (i, seg) in segs.iter().enumerate() {
            let (run, _) = forward_segment(
                &p,
                &c,
                &seg.inputs,
                seg.targets.as_deref(),
                &carry,
                &t.prefixes[i],
                i + 1,
                Mode::Inference,
            )
            .unwrap();
            assert_eq!(run.loss.unwrap().item().to_bits(), t.losses[i].to_bits());
            carry = run.carry_out.detach();
            assert!(carry.bits_eq(&t.carries[i + 1]));
        }
        assert_eq!(t.pool.total_rows(), 4 * 24);
        assert!(t.counters[2].pool_reads > 0);
    }

    #[test]
    fn inference_is_a_pure_function() {
        let c = cfg();
        let p = ModelParams::init(&c).unwrap();
        let a = run_inference(&p, &c, &sample(33)).unwrap();
        let b = run_inference(&p, &c, &sample(33)).unwrap();
        assert_eq!(a.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), b.losses.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.pool, b.pool);
    }

    #[test]
    fn lagged_pool_excludes_previous_segment() {
        let mut c = cfg();
        c.retrieval.pool_lag = 1;
        let p = ModelParams::init(&c).unwrap();
        let t = run_inference(&p, &c, &sample(33)).unwrap();
        assert!(t.prefixes[1].is_empty());
        for (i, pre) in t.prefixes.iter().enumerate().skip(2) {
            for slot in pre.slots() {
                assert!(pre.positions(slot.0, slot.1).iter().all(|&pos| pos < 8 * (i - 1)));
            }
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let c = cfg();
        let p = ModelParams::init(&c).unwrap();
        let a = generate(&p, &c, &[1, 2, 3], 10).unwrap();
        assert_eq!(a.len(), 10);
        assert_eq!(a, generate(&p, &c, &[1, 2, 3], 10).unwrap());
        assert!(generate(&p, &c, &[1], 0).is_err());
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
    }
}
