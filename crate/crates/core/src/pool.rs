//! Past-only KV pool for long-range heads and the forward-only top-k
//! retrieval operator that turns it into a fixed-length prefix.
//!
//! Nothing stored here ever carries a tape node: rows are copied out of the
//! producing segment as plain values, and retrieved prefixes are built from
//! those copies.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use crate::attention::{HeadPartition, PrefixKind, PrefixKv};
use crate::config::RetrievalConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const POOL_MAGIC: &[u8; 8] = b"SGTPOOL1";

#[derive(Clone, Debug, Default, PartialEq)]
struct PoolHead {
    keys: Vec<f64>,
    values: Vec<f64>,
    positions: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvPool {
    head_dim: usize,
    slots: BTreeMap<(usize, usize), PoolHead>,
    high_water: usize,
}

impl KvPool {
    pub fn new(partition: &HeadPartition, head_dim: usize) -> Self {
        let slots = partition.pool_slots().into_iter().map(|s| (s, PoolHead::default())).collect();
        Self { head_dim, slots, high_water: 0 }
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    /// Last segment index whose KV is stored (0 when empty).
    pub fn high_water(&self) -> usize {
        self.high_water
    }

    /// Rows stored for one `(layer, head)`.
    pub fn rows(&self, layer: usize, head: usize) -> usize {
        self.slots.get(&(layer, head)).map_or(0, |p| p.positions.len())
    }

    /// Rows summed over all slots.
    pub fn total_rows(&self) -> usize {
        self.slots.values().map(|p| p.positions.len()).sum()
    }

    pub fn slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.slots.keys().copied()
    }

    pub fn positions(&self, layer: usize, head: usize) -> &[usize] {
        self.slots.get(&(layer, head)).map_or(&[], |p| &p.positions)
    }

    pub fn values_mut(&mut self, layer: usize, head: usize) -> Option<&mut [f64]> {
        self.slots.get_mut(&(layer, head)).map(|p| p.values.as_mut_slice())
    }

    /// Append one segment's long-head KV. Values are copied; any tape node on
    /// the inputs is dropped.
    pub fn append(
        &mut self,
        segment_index: usize,
        first_position: usize,
        kv: &BTreeMap<(usize, usize), (Tensor, Tensor)>,
    ) -> Result<()> {
        if segment_index <= self.high_water {
            return Err(Error::Sequencing { segment: segment_index, high_water: self.high_water });
        }
        if let Some(slot) = self.slots.keys().find(|s| !kv.contains_key(s)) {
            return Err(Error::Contract(format!("segment KV is missing pool slot {slot:?}")));
        }
        for (slot, head) in self.slots.iter_mut() {
            let (k, v) = &kv[slot];
            if k.cols() != self.head_dim || k.shape() != v.shape() {
                return Err(Error::Dimension(format!("pool rows {:?} for head dim {}", k.shape(), self.head_dim)));
            }
            head.keys.extend_from_slice(k.data());
            head.values.extend_from_slice(v.data());
            head.positions.extend(first_position..first_position + k.rows());
        }
        self.high_water = segment_index;
        Ok(())
    }

    /// Flat binary snapshot: magic, head dim, high-water mark, slot count, then
    /// per slot `(layer, head, rows, d)` as u64 followed by key rows, value rows
    /// (little-endian f64) and source positions (u64).
    pub fn dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(POOL_MAGIC)?;
        for v in [self.head_dim, self.high_water, self.slots.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for ((l, h), p) in &self.slots {
            for v in [*l, *h, p.positions.len(), self.head_dim] {
                w.write_all(&(v as u64).to_le_bytes())?;
            }
            for x in p.keys.iter().chain(&p.values) {
                w.write_all(&x.to_le_bytes())?;
            }
            for &pos in &p.positions {
                w.write_all(&(pos as u64).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn restore<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != POOL_MAGIC {
            return Err(Error::Format("not a pool snapshot".into()));
        }
        let head_dim = read_u64(&mut r)? as usize;
        let high_water = read_u64(&mut r)? as usize;
        let n = read_u64(&mut r)? as usize;
        let mut slots = BTreeMap::new();
        for _ in 0..n {
            let l = read_u64(&mut r)? as usize;
            let h = read_u64(&mut r)? as usize;
            let rows = read_u64(&mut r)? as usize;
            let d = read_u64(&mut r)? as usize;
            if d != head_dim {
                return Err(Error::Format(format!("slot ({l},{h}) has d={d}, pool has {head_dim}")));
            }
            let keys = (0..rows * d).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
            let values = (0..rows * d).map(|_| read_f64(&mut r)).collect::<Result<_>>()?;
            let positions = (0..rows).map(|_| read_u64(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
            slots.insert((l, h), PoolHead { keys, values, positions });
        }
        Ok(Self { head_dim, slots, high_water })
    }
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Retrieved prefix for every pool slot, with the source position of each row.
#[derive(Clone, Debug, Default)]
pub struct RetrievedPrefix {
    entries: BTreeMap<(usize, usize), (PrefixKv, Vec<usize>)>,
}

impl RetrievedPrefix {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&PrefixKv> {
        self.entries.get(&(layer, head)).map(|e| &e.0)
    }

    pub fn positions(&self, layer: usize, head: usize) -> &[usize] {
        self.entries.get(&(layer, head)).map_or(&[], |e| &e.1)
    }

    pub fn slots(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.keys().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Prefix length of the first slot (all slots share it).
    pub fn len(&self) -> usize {
        self.entries.values().next().map_or(0, |e| e.0.len())
    }

    /// True when no stored tensor carries a tape node.
    pub fn is_detached(&self) -> bool {
        self.entries.values().all(|(kv, _)| !kv.keys.is_attached() && !kv.values.is_attached())
    }

    /// Replace one slot's values (used by sensitivity probes).
    pub fn set_values(&mut self, layer: usize, head: usize, values: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(&(layer, head))
            .ok_or_else(|| Error::Contract(format!("no retrieved prefix for ({layer},{head})")))?;
        e.0 = PrefixKv::new(e.0.keys.clone(), values.detached(), PrefixKind::Retrieved)?;
        Ok(())
    }
}

/// Query summaries from the last `L_q` rows: full sliding-window means
/// (width = stride = `query_window`, aligned to the end, oldest first)
/// followed by one mean over the final `query_tail` rows.
pub fn build_query_summary(queries: &Tensor, cfg: &RetrievalConfig) -> Vec<Vec<f64>> {
    let n = queries.rows();
    let lq = cfg.query_rows.min(n);
    if lq == 0 {
        return Vec::new();
    }
    let mean = |lo: usize, hi: usize| -> Vec<f64> {
        let d = queries.cols();
        let mut acc = vec![0.0; d];
        for r in lo..hi {
            for (a, x) in acc.iter_mut().zip(queries.row(r)) {
                *a += x;
            }
        }
        acc.iter_mut().for_each(|a| *a /= (hi - lo) as f64);
        acc
    };
    let w = cfg.query_window;
    let windows = lq / w;
    let mut out: Vec<Vec<f64>> = (0..windows)
        .rev()
        .map(|i| {
            let hi = n - i * w;
            mean(hi - w, hi)
        })
        .collect();
    let tail = cfg.query_tail.min(lq);
    out.push(mean(n - tail, n));
    out
}

/// Top-k retrieval for every pool slot that has summaries.
///
/// Per head: score each summary against every pool key, keep each summary's
/// top-k rows, deduplicate (a row's score is its best over summaries), take
/// the highest-scoring anchors, expand each by `±offset_window`, keep rows in
/// anchor order until `prefix_len` rows are chosen, pad with the earliest
/// unused rows, then sort by position. Ties go to the lower position.
pub fn retrieve(
    pool: &KvPool,
    summaries: &BTreeMap<(usize, usize), Vec<Vec<f64>>>,
    cfg: &RetrievalConfig,
    prefix_len: usize,
) -> Result<RetrievedPrefix> {
    let mut entries = BTreeMap::new();
    if prefix_len == 0 {
        return Ok(RetrievedPrefix { entries });
    }
    let d = pool.head_dim;
    for (slot, head) in &pool.slots {
        let n = head.positions.len();
        let Some(sums) = summaries.get(slot) else { continue };
        if n == 0 || sums.is_empty() {
            continue;
        }
        let key = |j: usize| &head.keys[j * d..(j + 1) * d];
        let mut best: BTreeMap<usize, f64> = BTreeMap::new();
        for s in sums {
            if s.len() != d {
                return Err(Error::Dimension(format!("summary of width {} for head dim {d}", s.len())));
            }
            let mut scored: Vec<(f64, usize)> =
                (0..n).map(|j| (s.iter().zip(key(j)).map(|(a, b)| a * b).sum(), j)).collect();
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for &(sc, j) in scored.iter().take(cfg.top_k) {
                let e = best.entry(j).or_insert(sc);
                if sc > *e {
                    *e = sc;
                }
            }
        }
        let mut ranked: Vec<(f64, usize)> = best.into_iter().map(|(j, s)| (s, j)).collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let w = cfg.offset_window;
        let mut chosen: Vec<usize> = Vec::with_capacity(prefix_len);
        let mut seen = BTreeSet::new();
        'anchors: for &(_, a) in ranked.iter().take(cfg.anchors(prefix_len)) {
            for j in a.saturating_sub(w)..=(a + w).min(n - 1) {
                if chosen.len() == prefix_len {
                    break 'anchors;
                }
                if seen.insert(j) {
                    chosen.push(j);
                }
            }
        }
        for j in 0..n {
            if chosen.len() == prefix_len {
                break;
            }
            if seen.insert(j) {
                chosen.push(j);
            }
        }
        chosen.sort_unstable();
        let gather = |buf: &[f64]| chosen.iter().flat_map(|&j| buf[j * d..(j + 1) * d].iter().copied()).collect();
        let keys = Tensor::new(vec![chosen.len(), d], gather(&head.keys))?;
        let values = Tensor::new(vec![chosen.len(), d], gather(&head.values))?;
        let positions = chosen.iter().map(|&j| head.positions[j]).collect();
        entries.insert(*slot, (PrefixKv::new(keys, values, PrefixKind::Retrieved)?, positions));
    }
    Ok(RetrievedPrefix { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn part() -> HeadPartition {
        HeadPartition::new(2, 2, vec![1], vec![0], vec![1]).unwrap()
    }

    fn seg(m: usize, d: usize, rng: &mut ChaCha8Rng) -> BTreeMap<(usize, usize), (Tensor, Tensor)> {
        let mk = |rng: &mut ChaCha8Rng| {
            Tensor::new(vec![m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        };
        let mut out = BTreeMap::new();
        let (k, v) = (mk(rng), mk(rng));
        out.insert((1, 0), (k, v));
        out
    }

    fn cfg(k: usize, w: usize) -> RetrievalConfig {
        RetrievalConfig { top_k: k, offset_window: w, query_window: 2, query_tail: 2, query_rows: 4, pool_lag: 0 }
    }

    #[test]
    fn append_counts_and_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mut pool = KvPool::new(&part(), 4);
        pool.append(1, 0, &seg(4, 4, &mut rng)).unwrap();
        assert_eq!(pool.rows(1, 0), 4);
        pool.append(2, 4, &seg(4, 4, &mut rng)).unwrap();
        assert_eq!(pool.rows(1, 0), 8);
        assert_eq!(pool.positions(1, 0), &[0, 1, 2, 3, 4, 5, 6, 7]);
        assert!(matches!(pool.append(2, 8, &seg(4, 4, &mut rng)), Err(Error::Sequencing { .. })));
        assert_eq!(pool.rows(1, 0), 8);
    }

    #[test]
    fn appended_rows_carry_no_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = crate::tensor::Tape::recording();
        let s: BTreeMap<_, _> = seg(3, 4, &mut rng).into_iter().map(|(k, (a, b))| (k, (tape.param(&a), tape.param(&b)))).collect();
        let mut pool = KvPool::new(&part(), 4);
        pool.append(1, 0, &s).unwrap();
        let mut sums = BTreeMap::new();
        sums.insert((1, 0), vec![vec![1.0; 4]]);
        let r = retrieve(&pool, &sums, &cfg(2, 1), 2).unwrap();
        assert!(r.is_detached());
        assert_eq!(r.len(), 2);
    }

    #[test]
    fn summaries_shape_and_constants() {
        let q = Tensor::new(vec![6, 2], (0..12).map(|i| i as f64).collect()).unwrap();
        let s = build_query_summary(&q, &cfg(1, 1));
        assert_eq!(s.len(), 3);
        // rows 2..6 are the last L_q=4: windows [2,3], [4,5]; tail [4,5]
        assert_eq!(s[0], vec![5.0, 6.0]);
        assert_eq!(s[1], vec![9.0, 10.0]);
        assert_eq!(s[2], vec![9.0, 10.0]);
        let c = Tensor::new(vec![5, 3], [1.5, -2.0, 0.25].repeat(5)).unwrap();
        for row in build_query_summary(&c, &cfg(1, 1)) {
            assert_eq!(row, vec![1.5, -2.0, 0.25]);
        }
    }

    #[test]
    fn single_row_pool_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut pool = KvPool::new(&part(), 4);
        pool.append(1, 0, &seg(1, 4, &mut rng)).unwrap();
        let mut sums = BTreeMap::new();
        sums.insert((1, 0), vec![vec![-3.0; 4]]);
        let r = retrieve(&pool, &sums, &cfg(4, 1), 1).unwrap();
        assert_eq!(r.positions(1, 0), &[0]);
    }

    #[test]
    fn planted_needle_is_an_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for trial in 0..20 {
            let mut pool = KvPool::new(&part(), 8);
            let mut s = seg(40, 8, &mut rng);
            let needle_at = rng.random_range(0..40);
            let query: Vec<f64> = (0..8).map(|_| rng.random_range(-3.0..3.0)).collect();
            {
                let (k, _) = s.get_mut(&(1, 0)).unwrap();
                k.data_mut()[needle_at * 8..needle_at * 8 + 8].copy_from_slice(&query);
            }
            pool.append(1, 0, &s).unwrap();
            // brute force argmax over the pool
            let best = (0..40)
                .map(|j| (pool.slots[&(1, 0)].keys[j * 8..j * 8 + 8].iter().zip(&query).map(|(a, b)| a * b).sum::<f64>(), j))
                .max_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)))
                .unwrap()
                .1;
            let mut sums = BTreeMap::new();
            sums.insert((1, 0), vec![query.clone()]);
            let r = retrieve(&pool, &sums, &cfg(4, 1), 4).unwrap();
            assert!(r.positions(1, 0).contains(&best), "trial {trial}");
            assert_eq!(best, needle_at, "needle should dominate in trial {trial}");
        }
    }

    #[test]
    fn pads_with_earliest_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let mut pool = KvPool::new(&part(), 4);
        pool.append(1, 0, &seg(10, 4, &mut rng)).unwrap();
        let q: Vec<f64> = pool.slots[&(1, 0)].keys[7 * 4..8 * 4].to_vec();
        let mut sums = BTreeMap::new();
        sums.insert((1, 0), vec![q.iter().map(|x| x * 100.0).collect()]);
        // one candidate, no expansion: R-3 rows remain, pad with three earliest
        let r = retrieve(&pool, &sums, &cfg(1, 0), 4).unwrap();
        let pos = r.positions(1, 0);
        assert_eq!(pos.len(), 4);
        let anchor = *pos.iter().find(|p| **p >= 3).unwrap();
        let mut expect = vec![0, 1, 2, anchor];
        expect.sort_unstable();
        assert_eq!(pos, expect.as_slice());
    }

    #[test]
    fn empty_pool_gives_empty_prefix() {
        let pool = KvPool::new(&part(), 4);
        let mut sums = BTreeMap::new();
        sums.insert((1, 0), vec![vec![1.0; 4]]);
        let r = retrieve(&pool, &sums, &cfg(4, 1), 4).unwrap();
        assert!(r.is_empty());
        assert_eq!(r.len(), 0);
    }

    #[test]
    fn dump_restore_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let mut pool = KvPool::new(&part(), 4);
        pool.append(1, 0, &seg(5, 4, &mut rng)).unwrap();
        pool.append(3, 5, &seg(2, 4, &mut rng)).unwrap();
        let mut buf = Vec::new();
        pool.dump(&mut buf).unwrap();
        let back = KvPool::restore(buf.as_slice()).unwrap();
        assert_eq!(back, pool);
        let mut again = Vec::new();
        back.dump(&mut again).unwrap();
        assert_eq!(again, buf);
        assert!(KvPool::restore(&b"garbage!"[..]).is_err());
    }

    proptest! {
        #[test]
        fn retrieval_is_deterministic_exact_length_and_past_only(
            seed in 0u64..500, rows in 1usize..30, r in 1usize..8, k in 1usize..5, w in 0usize..3
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pool = KvPool::new(&part(), 4);
            pool.append(1, 0, &seg(rows, 4, &mut rng)).unwrap();
            let mut sums = BTreeMap::new();
            let s: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            sums.insert((1, 0), s);
            let c = cfg(k, w);
            let a = retrieve(&pool, &sums, &c, r).unwrap();
            let b = retrieve(&pool, &sums, &c, r).unwrap();
            prop_assert_eq!(a.positions(1, 0), b.positions(1, 0));
            prop_assert_eq!(a.get(1, 0).unwrap().keys.data(), b.get(1, 0).unwrap().keys.data());
            prop_assert_eq!(a.len(), r.min(rows));
            prop_assert!(a.positions(1, 0).windows(2).all(|p| p[0] < p[1]));
            prop_assert!(a.positions(1, 0).iter().all(|&p| p < rows));
        }
    }
}
