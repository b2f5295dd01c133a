//! Synthetic token streams: a Markov language model with a fixed random
//! transition table, and a planted key recall task whose answer lies beyond
//! the carried horizon.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Seed of the fixed transition table shared by every local-LM sample.
pub const TABLE_SEED: u64 = 0x5eed_7ab1e;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallMeta {
    pub key_pos: usize,
    pub key_token: usize,
    /// Input position whose next-token target is the key.
    pub query_pos: usize,
    pub answer_token: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSample {
    pub tokens: Vec<usize>,
    pub recall: Option<RecallMeta>,
}

/// Markov chain over `vocab` tokens whose state is the tokens `lags` back
/// (lag 1 is the current token). Each state has `branch` successors with
/// random weights.
#[derive(Clone, Debug)]
pub struct MarkovTable {
    pub vocab: usize,
    pub lags: Vec<usize>,
    /// `vocab^|lags|` rows of `(token, probability)`.
    rows: Vec<Vec<(usize, f64)>>,
}

impl MarkovTable {
    pub fn new(seed: u64, vocab: usize, lags: &[usize], branch: usize) -> Result<Self> {
        if vocab < 2 || lags.is_empty() || lags.contains(&0) || branch == 0 || branch > vocab {
            return Err(Error::Spec(format!("bad Markov table: vocab {vocab}, lags {lags:?}, branch {branch}")));
        }
        let states = vocab.checked_pow(lags.len() as u32).ok_or_else(|| Error::Spec("state space overflow".into()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..states)
            .map(|_| {
                let mut next: Vec<usize> = Vec::with_capacity(branch);
                while next.len() < branch {
                    let t = rng.random_range(0..vocab);
                    if !next.contains(&t) {
                        next.push(t);
                    }
                }
                let w: Vec<f64> = (0..branch).map(|_| rng.random_range(0.2..1.0)).collect();
                let z: f64 = w.iter().sum();
                next.into_iter().zip(w).map(|(t, x)| (t, x / z)).collect()
            })
            .collect();
        Ok(Self { vocab, lags: lags.to_vec(), rows })
    }

    /// Tokens of history needed before the chain can step.
    pub fn order(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(1)
    }

    fn state(&self, history: &[usize]) -> usize {
        self.lags.iter().fold(0, |s, &l| s * self.vocab + history[history.len() - l])
    }

    /// Successor distribution after `history` (at least `order()` tokens).
    pub fn next_dist(&self, history: &[usize]) -> &[(usize, f64)] {
        &self.rows[self.state(history)]
    }

    /// Entropy rate under the uniform mixture of states (nats).
    pub fn mean_entropy(&self) -> f64 {
        let h: f64 = self.rows.iter().map(|r| -r.iter().map(|(_, p)| p * p.ln()).sum::<f64>()).sum();
        h / self.rows.len() as f64
    }

    /// `length` tokens, the first `order()` uniform, offset by `base`.
    pub fn sample(&self, rng: &mut ChaCha8Rng, length: usize, base: usize) -> Vec<usize> {
        let mut out: Vec<usize> = (0..self.order().min(length)).map(|_| rng.random_range(0..self.vocab)).collect();
        while out.len() < length {
            let u: f64 = rng.random();
            let dist = self.next_dist(&out);
            let mut acc = 0.0;
            let mut pick = dist[dist.len() - 1].0;
            for &(t, p) in dist {
                acc += p;
                if u < acc {
                    pick = t;
                    break;
                }
            }
            out.push(pick);
        }
        out.into_iter().map(|t| t + base).collect()
    }
}

/// The local language-model task.
#[derive(Clone, Debug)]
pub struct LocalLm {
    pub table: MarkovTable,
}

impl LocalLm {
    pub fn new(vocab: usize, lags: &[usize], branch: usize) -> Result<Self> {
        Ok(Self { table: MarkovTable::new(TABLE_SEED, vocab, lags, branch)? })
    }

    pub fn sample(&self, seed: u64, length: usize) -> Result<SyntheticSample> {
        if length < 2 {
            return Err(Error::Spec(format!("local-LM sample length {length} < 2")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(SyntheticSample { tokens: self.table.sample(&mut rng, length, 0), recall: None })
    }
}

/// Default local-LM task: the next token depends on the token two back, 3
/// successors per state. The current token alone says nothing, so a model
/// must look one position back.
pub fn gen_local_lm(seed: u64, length: usize, vocab: usize) -> Result<SyntheticSample> {
    LocalLm::new(vocab, &[2], 3)?.sample(seed, length)
}

/// Layout of the planted recall task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecallLayout {
    pub segment_len: usize,
    pub carry_len: usize,
    /// Cue tokens ending at the query position.
    pub cue_len: usize,
    /// Distinct key tokens.
    pub keys: usize,
    /// Successors per state in the order-1 noise chain.
    pub noise_branch: usize,
}

impl RecallLayout {
    pub const MARKER: usize = 0;
    pub const QUERY: usize = 1;
    pub const FIRST_KEY: usize = 2;

    pub fn first_noise(&self) -> usize {
        Self::FIRST_KEY + self.keys
    }
}

/// Noise plus `MARKER KEY … cue … QUERY → KEY`. The query position is the
/// first segment start at least `gap` tokens after the key, so the key sits
/// outside the local window of the segment that must answer.
pub fn gen_planted_recall(seed: u64, length: usize, vocab: usize, gap: usize, layout: &RecallLayout) -> Result<SyntheticSample> {
    let min_gap = layout.segment_len + layout.carry_len;
    if gap < min_gap {
        return Err(Error::Spec(format!("recall gap {gap} is shorter than S + M = {min_gap}")));
    }
    let noise_vocab = vocab
        .checked_sub(layout.first_noise())
        .filter(|&n| n >= 2)
        .ok_or_else(|| Error::Spec(format!("vocab {vocab} leaves no room for noise tokens")))?;
    let s = layout.segment_len;
    let query_pos = (gap + 1).div_ceil(s) * s;
    let key_pos = query_pos - gap;
    if query_pos + 2 > length {
        return Err(Error::Spec(format!("length {length} too short for a query at {query_pos}")));
    }
    if layout.cue_len == 0 || query_pos + 1 - layout.cue_len <= key_pos {
        return Err(Error::Spec(format!("cue of {} tokens overlaps the key", layout.cue_len)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = MarkovTable::new(TABLE_SEED, noise_vocab, &[1], layout.noise_branch)?;
    let mut tokens = noise.sample(&mut rng, length, layout.first_noise());
    let key = RecallLayout::FIRST_KEY + rng.random_range(0..layout.keys);
    tokens[key_pos - 1] = RecallLayout::MARKER;
    tokens[key_pos] = key;
    for t in &mut tokens[query_pos + 1 - layout.cue_len..=query_pos] {
        *t = RecallLayout::QUERY;
    }
    tokens[query_pos + 1] = key;
    Ok(SyntheticSample {
        tokens,
        recall: Some(RecallMeta { key_pos, key_token: key, query_pos, answer_token: key }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layout() -> RecallLayout {
        RecallLayout { segment_len: 8, carry_len: 4, cue_len: 4, keys: 8, noise_branch: 3 }
    }

    #[test]
    fn local_lm_is_deterministic_and_learnable() {
        assert_eq!(gen_local_lm(3, 50, 16).unwrap(), gen_local_lm(3, 50, 16).unwrap());
        assert_ne!(gen_local_lm(3, 50, 16).unwrap(), gen_local_lm(4, 50, 16).unwrap());
        assert_eq!(gen_local_lm(0, 2, 16).unwrap().tokens.len(), 2);
        assert!(gen_local_lm(0, 1, 16).is_err());
        let lm = LocalLm::new(16, &[2], 3).unwrap();
        assert_eq!(lm.table.order(), 2);
        assert!(lm.table.mean_entropy() < (16f64).ln());
        assert!(lm.table.mean_entropy() <= 3f64.ln() + 1e-12);
        // Every transition in a sample is one the table allows.
        let s = gen_local_lm(9, 200, 16).unwrap().tokens;
        for w in s.windows(3) {
            assert!(lm.table.next_dist(&w[..2]).iter().any(|(t, _)| *t == w[2]));
        }
    }

    #[test]
    fn recall_metadata_matches_stream() {
        for seed in 0..20 {
            let s = gen_planted_recall(seed, 25, 64, 12 + (seed as usize % 4), &layout()).unwrap();
            let m = s.recall.unwrap();
            assert_eq!(s.tokens[m.key_pos], m.key_token);
            assert_eq!(s.tokens[m.key_pos - 1], RecallLayout::MARKER);
            assert_eq!(s.tokens[m.query_pos], RecallLayout::QUERY);
            assert_eq!(s.tokens[m.query_pos + 1], m.answer_token);
            assert_eq!(m.query_pos % 8, 0);
            assert!(m.query_pos - m.key_pos >= 12);
            // The key appears exactly twice: planted and as the answer.
            assert_eq!(s.tokens.iter().filter(|&&t| t == m.key_token).count(), 2);
        }
    }

    #[test]
    fn recall_gap_boundary() {
        assert!(gen_planted_recall(0, 25, 64, 12, &layout()).is_ok());
        assert!(matches!(gen_planted_recall(0, 25, 64, 11, &layout()), Err(Error::Spec(_))));
    }
}
