//! Decoder parameters and the per-segment forward operator.
//!
//! `forward_segment_on` is the single forward path for training and
//! inference. The only difference between the two is whether the tape it is
//! given records; the arithmetic is the same code either way.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::attention::{attend_context, build_context};
use crate::carry::CarriedState;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::pool::RetrievedPrefix;
use crate::tensor::{GradientMap, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub attn_norm: Tensor,
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Vec<Tensor>,
    pub ffn_norm: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embed: Tensor,
    pub layers: Vec<LayerParams>,
    pub final_norm: Tensor,
    pub head: Tensor,
}

impl ModelParams {
    /// Gaussian(0, init_std) matrices, unit norm gains.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| Error::Config(e.to_string()))?;
        let mut mat = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| normal.sample(&mut rng)).collect();
            Tensor::new(vec![r, c], data).expect("shape")
        };
        let (d, dh, f, v) = (cfg.d_model, cfg.head_dim(), cfg.d_ff, cfg.vocab);
        let ones = |n: usize| Tensor::new(vec![n], vec![1.0; n]).expect("shape");
        let embed = mat(v, d);
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let wq = (0..cfg.heads).map(|_| mat(d, dh)).collect();
            let wk = (0..cfg.heads).map(|_| mat(d, dh)).collect();
            let wv = (0..cfg.heads).map(|_| mat(d, dh)).collect();
            let wo = (0..cfg.heads).map(|_| mat(dh, d)).collect();
            let w1 = mat(d, f);
            let w2 = mat(f, d);
            layers.push(LayerParams { attn_norm: ones(d), wq, wk, wv, wo, ffn_norm: ones(d), w1, w2 });
        }
        let head = mat(d, v);
        Ok(Self { embed, layers, final_norm: ones(d), head })
    }

    /// Parameters in canonical order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embed".to_string(), &self.embed)];
        for (l, lp) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &lp.attn_norm));
            for (name, group) in [("wq", &lp.wq), ("wk", &lp.wk), ("wv", &lp.wv), ("wo", &lp.wo)] {
                for (h, t) in group.iter().enumerate() {
                    out.push((format!("layers.{l}.{name}.{h}"), t));
                }
            }
            out.push((format!("layers.{l}.ffn_norm"), &lp.ffn_norm));
            out.push((format!("layers.{l}.w1"), &lp.w1));
            out.push((format!("layers.{l}.w2"), &lp.w2));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable access in the same order as [`Self::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed];
        for lp in &mut self.layers {
            out.push(&mut lp.attn_norm);
            for group in [&mut lp.wq, &mut lp.wk, &mut lp.wv, &mut lp.wo] {
                out.extend(group.iter_mut());
            }
            out.push(&mut lp.ffn_norm);
            out.push(&mut lp.w1);
            out.push(&mut lp.w2);
        }
        out.push(&mut self.final_norm);
        out.push(&mut self.head);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.named().into_iter().flat_map(|(_, t)| t.data().to_vec()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Dimension(format!("{} values for {} parameters", flat.len(), self.num_params())));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Copy registered as θ on `tape` (constants on an inactive tape).
    pub fn bind(&self, tape: &mut Tape) -> Self {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            *t = tape.param(t);
        }
        out
    }

    /// Gradient of bound parameters, flattened in canonical order (zeros where absent).
    pub fn grad_flat(&self, grads: &GradientMap) -> Vec<f64> {
        self.named().into_iter().flat_map(|(_, t)| grads.of_or_zero(t)).collect()
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.flat(), other.flat());
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Training,
    Inference,
}

/// Exact per-segment instrumentation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentCounters {
    /// Key rows visible to attention, per `(layer, head)`.
    pub kv_len: BTreeMap<(usize, usize), usize>,
    /// Multiply-accumulates in `Q Kᵀ` and `weights · V` over all heads and layers.
    pub attn_macs: u64,
    /// Pool rows scored by retrieval before this segment.
    pub pool_reads: u64,
    /// Query positions in the segment.
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct SegmentRun {
    pub logits: Tensor,
    pub loss: Option<Tensor>,
    pub carry_out: CarriedState,
    /// Un-rotated long-head KV for the pool, detached.
    pub pool_kv: BTreeMap<(usize, usize), (Tensor, Tensor)>,
    /// Last `query_rows` un-rotated long-head queries, detached.
    pub tail_queries: BTreeMap<(usize, usize), Tensor>,
    pub counters: SegmentCounters,
}

/// One segment through the decoder stack on a caller-provided tape.
///
/// `params` must be bound to `tape` (or be constants). `targets`, when
/// given, has one entry per input token and yields the mean cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn forward_segment_on(
    tape: &mut Tape,
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    targets: Option<&[usize]>,
    carry_in: &CarriedState,
    prefix_in: &RetrievedPrefix,
    segment_index: usize,
) -> Result<SegmentRun> {
    let m = tokens.len();
    if m == 0 {
        return Err(Error::Input("segment must contain at least one token".into()));
    }
    if let Some(&bad) = tokens.iter().chain(targets.unwrap_or(&[])).find(|&&t| t >= cfg.vocab) {
        return Err(Error::Input(format!("token id {bad} >= vocab {}", cfg.vocab)));
    }
    if let Some(t) = targets {
        if t.len() != m {
            return Err(Error::Input(format!("{} targets for {m} tokens", t.len())));
        }
    }
    let part = &cfg.partition;
    let dh = cfg.head_dim();
    let mut counters = SegmentCounters { tokens: m, ..Default::default() };
    let mut local_kv = BTreeMap::new();
    let mut pool_kv = BTreeMap::new();
    let mut tail_queries = BTreeMap::new();

    let mut h = tape.gather_rows(&params.embed, tokens)?;
    for (l, lp) in params.layers.iter().enumerate() {
        let a = tape.rms_norm(&h, &lp.attn_norm)?;
        let mut mixed: Option<Tensor> = None;
        for hd in 0..cfg.heads {
            let q = tape.matmul(&a, &lp.wq[hd])?;
            let k = tape.matmul(&a, &lp.wk[hd])?;
            let v = tape.matmul(&a, &lp.wv[hd])?;
            let local = part.is_local(hd);
            let long_here = part.is_long(hd) && part.is_long_layer(l);
            let carried = if local { carry_in.get(l, hd) } else { None };
            let retrieved = if long_here { prefix_in.get(l, hd) } else { None };
            let ctx = build_context(tape, l, hd, &k, &v, carried, retrieved, part)?;
            let n = ctx.keys.rows();
            counters.kv_len.insert((l, hd), n);
            counters.attn_macs += 2 * (m * n * dh) as u64;
            let o = attend_context(tape, &q, &ctx)?;
            let proj = tape.matmul(&o, &lp.wo[hd])?;
            mixed = Some(match mixed {
                None => proj,
                Some(acc) => tape.add(&acc, &proj)?,
            });
            if local {
                local_kv.insert((l, hd), (k, v));
            } else if long_here {
                let keep = cfg.retrieval.query_rows.min(m);
                let qd = q.detached();
                let tail = Tape::inactive().slice(&qd, 0, m - keep, keep)?;
                tail_queries.insert((l, hd), tail);
                pool_kv.insert((l, hd), (k.detached(), v.detached()));
            }
        }
        let mixed = mixed.ok_or_else(|| Error::Config("layer without heads".into()))?;
        h = tape.add(&h, &mixed)?;
        let f = tape.rms_norm(&h, &lp.ffn_norm)?;
        let up = tape.matmul(&f, &lp.w1)?;
        let act = tape.gelu(&up);
        let down = tape.matmul(&act, &lp.w2)?;
        h = tape.add(&h, &down)?;
    }
    let hn = tape.rms_norm(&h, &params.final_norm)?;
    let logits = tape.matmul(&hn, &params.head)?;
    let loss = match targets {
        Some(t) => Some(tape.cross_entropy(&logits, t)?),
        None => None,
    };
    let carry_out = CarriedState::extract(tape, &local_kv, part, cfg.carry_len, segment_index)?;
    Ok(SegmentRun { logits, loss, carry_out, pool_kv, tail_queries, counters })
}

/// Run one segment in the given mode on a fresh tape, returning the tape too.
#[allow(clippy::too_many_arguments)]
pub fn forward_segment(
    params: &ModelParams,
    cfg: &ModelConfig,
    tokens: &[usize],
    targets: Option<&[usize]>,
    carry_in: &CarriedState,
    prefix_in: &RetrievedPrefix,
    segment_index: usize,
    mode: Mode,
) -> Result<(SegmentRun, Tape)> {
    let mut tape = Tape::new(mode == Mode::Training);
    let bound = params.bind(&mut tape);
    let run = forward_segment_on(&mut tape, &bound, cfg, tokens, targets, carry_in, prefix_in, segment_index)?;
    Ok((run, tape))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.layers = 2;
        c.d_model = 16;
        c.d_ff = 16;
        c.vocab = 11;
        c.init_std = 0.3;
        c.partition = crate::attention::HeadPartition::new(4, 2, vec![2, 3], vec![0, 1], vec![1]).unwrap();
        c
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg).unwrap();
        let c = CarriedState::init_empty(&cfg.partition, cfg.carry_len, cfg.head_dim());
        let r = RetrievedPrefix::empty();
        assert!(matches!(forward_segment(&p, &cfg, &[], None, &c, &r, 1, Mode::Inference), Err(Error::Input(_))));
        assert!(matches!(forward_segment(&p, &cfg, &[1, 11], None, &c, &r, 1, Mode::Inference), Err(Error::Input(_))));
    }

    #[test]
    fn zero_head_gives_uniform_loss() {
        let mut cfg = tiny();
        cfg.vocab = 7;
        let mut p = ModelParams::init(&cfg).unwrap();
        p.head = Tensor::zeros(vec![cfg.d_model, 7]);
        let c = CarriedState::init_empty(&cfg.partition, cfg.carry_len, cfg.head_dim());
        let (run, _) =
            forward_segment(&p, &cfg, &[1, 2, 3], Some(&[2, 3, 4]), &c, &RetrievedPrefix::empty(), 1, Mode::Inference)
                .unwrap();
        assert!((run.loss.unwrap().item() - 7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn training_and_inference_logits_are_bit_identical() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg).unwrap();
        let c = CarriedState::init_empty(&cfg.partition, cfg.carry_len, cfg.head_dim());
        let toks = [3, 1, 4, 1, 5, 9, 2, 6];
        let r = RetrievedPrefix::empty();
        let (a, tape) = forward_segment(&p, &cfg, &toks, Some(&toks), &c, &r, 1, Mode::Training).unwrap();
        let (b, dead) = forward_segment(&p, &cfg, &toks, Some(&toks), &c, &r, 1, Mode::Inference).unwrap();
        assert!(a.logits.data().iter().zip(b.logits.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(!tape.is_empty());
        assert!(dead.is_empty());
        tape.verify_replay().unwrap();
    }

    #[test]
    fn param_round_trip_and_names() {
        let cfg = tiny();
        let mut p = ModelParams::init(&cfg).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "embed");
        assert_eq!(names.last().unwrap(), "head");
        assert!(names.contains(&"layers.1.wo.3".to_string()));
        let flat = p.flat();
        let mut q = p.clone();
        q.set_flat(&flat).unwrap();
        assert!(q.bits_eq(&p));
        assert!(p.set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn segment_loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let p = ModelParams::init(&cfg).unwrap();
        let c = CarriedState::init_empty(&cfg.partition, cfg.carry_len, cfg.head_dim());
        let toks = [3, 1, 4, 1, 5];
        let tg = [1, 4, 1, 5, 9];
        let r = RetrievedPrefix::empty();
        let (run, tape) = forward_segment(&p, &cfg, &toks, Some(&tg), &c, &r, 1, Mode::Training).unwrap();
        let mut t2 = Tape::recording();
        let bound = p.bind(&mut t2);
        let run2 = forward_segment_on(&mut t2, &bound, &cfg, &toks, Some(&tg), &c, &r, 1).unwrap();
        let g = t2.backward(run2.loss.as_ref().unwrap()).unwrap();
        assert_eq!(run.loss.unwrap().item(), run2.loss.as_ref().unwrap().item());
        drop(tape);
        let wq = &bound.layers[0].wq[2];
        let tape_grad = g.of(wq).unwrap().to_vec();
        let fd = finite_diff_grad(
            |probe| {
                let mut q = p.clone();
                q.layers[0].wq[2] = probe.clone();
                let (run, _) = forward_segment(&q, &cfg, &toks, Some(&tg), &c, &r, 1, Mode::Inference)?;
                Ok(run.loss.unwrap().item())
            },
            &p.layers[0].wq[2],
            1e-5,
        )
        .unwrap();
        for (a, b) in tape_grad.iter().zip(fd.data()) {
            assert!((a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6), "{a} vs {b}");
        }
    }
}
