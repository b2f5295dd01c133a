//! The K-truncated objective, its two implementations, the adjoint-recursion
//! oracle and the training loops built on them.

use std::collections::VecDeque;
use std::time::Instant;

use crate::carry::CarriedState;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::executor::{run_chain, segment_sample, ChainTrace, Segment, SegmentChain};
use crate::model::{forward_segment_on, ModelParams};
use crate::tensor::{Tape, Tensor};

/// `b_i = max(0, i - K - 1)`.
pub fn truncation_boundary(i: usize, k: usize) -> usize {
    i.saturating_sub(k + 1)
}

/// Boundaries and unroll ranges for every loss index `1..=n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TruncationPlan {
    pub k: usize,
    pub boundaries: Vec<usize>,
}

impl TruncationPlan {
    pub fn new(n: usize, k: usize) -> Self {
        Self { k, boundaries: (1..=n).map(|i| truncation_boundary(i, k)).collect() }
    }

    /// Segments re-run on the tape for loss `i`: `b_i + 1 ..= i - 1`.
    pub fn unroll(&self, i: usize) -> std::ops::Range<usize> {
        self.boundaries[i - 1] + 1..i
    }
}

/// Result of a gradient computation over one sample.
#[derive(Clone, Debug)]
pub struct SampleGradient {
    /// `Σ_i ℓ_i`, summed in segment order.
    pub loss: f64,
    pub segment_losses: Vec<f64>,
    /// Flat gradient in canonical parameter order.
    pub grad: Vec<f64>,
}

/// Literal objective: for every `i`, detach the reference carry `C_{b_i}`,
/// re-run segments `b_i + 1 .. i - 1` on one shared tape with the reference
/// prefixes, then evaluate `ℓ_i`. Returns the summed loss, its tape and the
/// bound parameters.
pub fn loss_lk(
    params: &ModelParams,
    cfg: &ModelConfig,
    segments: &[Segment],
    k: usize,
    trace: &ChainTrace,
    tape: &mut Tape,
) -> Result<(Tensor, ModelParams)> {
    if segments.is_empty() {
        return Err(Error::Input("no segments".into()));
    }
    let bound = params.bind(tape);
    let plan = TruncationPlan::new(segments.len(), k);
    let mut total: Option<Tensor> = None;
    for i in 1..=segments.len() {
        let mut carry = trace.carries[plan.boundaries[i - 1]].detach();
        for j in plan.unroll(i) {
            let seg = &segments[j - 1];
            let run = forward_segment_on(tape, &bound, cfg, &seg.inputs, None, &carry, &trace.prefixes[j - 1], j)?;
            carry = run.carry_out;
        }
        let seg = &segments[i - 1];
        let targets = seg.targets.as_deref().ok_or_else(|| Error::Input(format!("segment {i} has no targets")))?;
        let run = forward_segment_on(tape, &bound, cfg, &seg.inputs, Some(targets), &carry, &trace.prefixes[i - 1], i)?;
        let li = run.loss.expect("targets given");
        total = Some(match total {
            None => li,
            Some(acc) => tape.add(&acc, &li)?,
        });
    }
    Ok((total.expect("at least one segment"), bound))
}

/// Gradient of the literal objective by one backward pass over its tape.
pub fn literal_gradient(params: &ModelParams, cfg: &ModelConfig, segments: &[Segment], k: usize) -> Result<SampleGradient> {
    let trace = run_chain(params, cfg, segments)?;
    let mut tape = Tape::recording();
    let (loss, bound) = loss_lk(params, cfg, segments, k, &trace, &mut tape)?;
    let grads = tape.backward(&loss)?;
    Ok(SampleGradient { loss: loss.item(), segment_losses: trace.losses, grad: bound.grad_flat(&grads) })
}

/// Value of the objective with boundary carries and prefixes frozen at
/// `trace`; the function finite differences are taken of.
pub fn loss_lk_frozen(
    params: &ModelParams,
    cfg: &ModelConfig,
    segments: &[Segment],
    k: usize,
    trace: &ChainTrace,
) -> Result<f64> {
    let mut tape = Tape::inactive();
    Ok(loss_lk(params, cfg, segments, k, trace, &mut tape)?.0.item())
}

struct Retained {
    tape: Tape,
    bound: ModelParams,
    carry_in: CarriedState,
    carry_out: CarriedState,
}

/// Sequential schedule: one tape per segment, keeping the last `K` tapes so
/// the carry adjoint of `ℓ_i` can be pushed back through at most `K` state
/// transitions before it is dropped.
pub fn tbptt_gradient(params: &ModelParams, cfg: &ModelConfig, segments: &[Segment], k: usize) -> Result<SampleGradient> {
    if segments.is_empty() {
        return Err(Error::Input("no segments".into()));
    }
    let mut chain = SegmentChain::new(cfg);
    let mut ring: VecDeque<Retained> = VecDeque::with_capacity(k + 1);
    let mut grad = vec![0.0; params.num_params()];
    let mut losses = Vec::with_capacity(segments.len());
    let add = |grad: &mut Vec<f64>, g: Vec<f64>| grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);

    for seg in segments {
        let i = chain.next_index();
        let (prefix, _) = chain.prefix()?;
        let mut tape = Tape::recording();
        let bound = params.bind(&mut tape);
        let carry_in = chain.carry().attach_inputs(&mut tape);
        let targets = seg.targets.as_deref().ok_or_else(|| Error::Input(format!("segment {i} has no targets")))?;
        let run = forward_segment_on(&mut tape, &bound, cfg, &seg.inputs, Some(targets), &carry_in, &prefix, i)?;
        let loss = run.loss.as_ref().expect("targets given");
        losses.push(loss.item());

        let g = tape.backward(loss)?;
        add(&mut grad, bound.grad_flat(&g));
        let mut adjoint: Vec<Vec<f64>> = carry_in.tensors().iter().map(|t| g.of_or_zero(t)).collect();
        for step in ring.iter().take(k) {
            let outs = step.carry_out.tensors();
            let seeds: Vec<(&Tensor, &[f64])> = outs.iter().copied().zip(adjoint.iter().map(Vec::as_slice)).collect();
            let g = step.tape.backward_seeded(&seeds)?;
            add(&mut grad, step.bound.grad_flat(&g));
            adjoint = step.carry_in.tensors().iter().map(|t| g.of_or_zero(t)).collect();
        }

        chain.absorb(&run)?;
        if k > 0 {
            ring.push_front(Retained { tape, bound, carry_in, carry_out: run.carry_out });
            ring.truncate(k);
        }
    }
    let loss = losses.iter().fold(0.0, |a, l| a + l);
    Ok(SampleGradient { loss, segment_losses: losses, grad })
}

/// One segment's tape built on the reference incoming carry, for the oracle.
pub struct StepTape {
    pub tape: Tape,
    pub loss: Tensor,
    /// Incoming carry registered as input leaves.
    pub carry_in: Vec<Tensor>,
    /// Outgoing carry (attached).
    pub carry_out: Vec<Tensor>,
    /// Parameters registered as θ, in canonical order.
    pub params: Vec<Tensor>,
}

impl StepTape {
    fn param_grad(&self, g: &crate::tensor::GradientMap) -> Vec<f64> {
        self.params.iter().flat_map(|t| g.of_or_zero(t)).collect()
    }

    fn carry_grad(&self, g: &crate::tensor::GradientMap) -> Vec<f64> {
        self.carry_in.iter().flat_map(|t| g.of_or_zero(t)).collect()
    }
}

/// A chain of segments with a differentiable carry, seen through per-step tapes.
pub trait ChainSystem {
    fn segments(&self) -> usize;
    fn param_count(&self) -> usize;
    /// Tape for segment `j` (1-based) on the reference carry `C_{j-1}`.
    fn step(&self, j: usize) -> Result<StepTape>;
}

/// Upper bound on dense Jacobian entries the oracle will materialise.
pub const ORACLE_DENSE_LIMIT: usize = 64 << 20;

/// Gradient of `L_K` from the adjoint recursion over dense per-step Jacobians
/// `J_j = ∂C_j/∂C_{j-1}` and `U_j = ∂C_j/∂θ`, built one row at a time.
pub fn adjoint_oracle<S: ChainSystem>(sys: &S, k: usize) -> Result<Vec<f64>> {
    let n = sys.segments();
    let p = sys.param_count();
    let steps: Vec<StepTape> = (1..=n).map(|j| sys.step(j)).collect::<Result<_>>()?;
    let mut grad = vec![0.0; p];
    // Direct terms and g_{i-1} = ∂ℓ_i/∂C_{i-1}.
    let mut g_prev: Vec<Vec<f64>> = Vec::with_capacity(n);
    for st in &steps {
        let g = st.tape.backward(&st.loss)?;
        grad.iter_mut().zip(st.param_grad(&g)).for_each(|(a, b)| *a += b);
        g_prev.push(st.carry_grad(&g));
    }
    // Live adjoints a_j^{(i)}, keyed by loss index i.
    let mut live: Vec<(usize, Vec<f64>)> = Vec::new();
    for j in (1..n).rev() {
        let i = j + 1;
        if j > truncation_boundary(i, k) {
            live.push((i, g_prev[i - 1].clone()));
        }
        live.retain(|(i, _)| j > truncation_boundary(*i, k));
        if live.is_empty() {
            continue;
        }
        let st = &steps[j - 1];
        let d_out: usize = st.carry_out.iter().map(Tensor::len).sum();
        let d_in: usize = st.carry_in.iter().map(Tensor::len).sum();
        if d_out * (d_in + p) > ORACLE_DENSE_LIMIT {
            return Err(Error::Capability(format!(
                "dense Jacobians need {} entries, limit {ORACLE_DENSE_LIMIT}",
                d_out * (d_in + p)
            )));
        }
        let mut w = vec![0.0; d_out];
        for (_, a) in &live {
            w.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
        let mut jac = vec![0.0; d_out * d_in];
        let mut seed_bufs: Vec<Vec<f64>> = st.carry_out.iter().map(|t| vec![0.0; t.len()]).collect();
        let mut r = 0;
        for (ti, t) in st.carry_out.iter().enumerate() {
            for e in 0..t.len() {
                seed_bufs[ti][e] = 1.0;
                let seeds: Vec<(&Tensor, &[f64])> =
                    st.carry_out.iter().zip(seed_bufs.iter().map(Vec::as_slice)).collect();
                let g = st.tape.backward_seeded(&seeds)?;
                seed_bufs[ti][e] = 0.0;
                let u_row = st.param_grad(&g);
                grad.iter_mut().zip(&u_row).for_each(|(a, u)| *a += w[r] * u);
                jac[r * d_in..(r + 1) * d_in].copy_from_slice(&st.carry_grad(&g));
                r += 1;
            }
        }
        for (_, a) in live.iter_mut() {
            let mut next = vec![0.0; d_in];
            for (row, &ar) in a.iter().enumerate() {
                if ar != 0.0 {
                    for (c, x) in next.iter_mut().enumerate() {
                        *x += ar * jac[row * d_in + c];
                    }
                }
            }
            *a = next;
        }
    }
    Ok(grad)
}

/// The decoder chain on a fixed sample, anchored at its reference forward pass.
pub struct ModelChain<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
    pub segments: &'a [Segment],
    pub trace: ChainTrace,
}

impl<'a> ModelChain<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig, segments: &'a [Segment]) -> Result<Self> {
        let trace = run_chain(params, cfg, segments)?;
        Ok(Self { params, cfg, segments, trace })
    }
}

impl ChainSystem for ModelChain<'_> {
    fn segments(&self) -> usize {
        self.segments.len()
    }

    fn param_count(&self) -> usize {
        self.params.num_params()
    }

    fn step(&self, j: usize) -> Result<StepTape> {
        let mut tape = Tape::recording();
        let bound = self.params.bind(&mut tape);
        let carry_in = self.trace.carries[j - 1].attach_inputs(&mut tape);
        let seg = &self.segments[j - 1];
        let targets = seg.targets.as_deref().ok_or_else(|| Error::Input(format!("segment {j} has no targets")))?;
        let run =
            forward_segment_on(&mut tape, &bound, self.cfg, &seg.inputs, Some(targets), &carry_in, &self.trace.prefixes[j - 1], j)?;
        Ok(StepTape {
            loss: run.loss.expect("targets given"),
            carry_in: carry_in.tensors().into_iter().cloned().collect(),
            carry_out: run.carry_out.tensors().into_iter().cloned().collect(),
            params: bound.named().into_iter().map(|(_, t)| t.clone()).collect(),
            tape,
        })
    }
}

/// Oracle gradient of `L_K` for the decoder on one sample.
pub fn adjoint_oracle_gradient(params: &ModelParams, cfg: &ModelConfig, segments: &[Segment], k: usize) -> Result<Vec<f64>> {
    adjoint_oracle(&ModelChain::new(params, cfg, segments)?, k)
}

/// Central finite differences of the frozen objective on chosen coordinates.
pub fn finite_diff_coords(
    params: &ModelParams,
    cfg: &ModelConfig,
    segments: &[Segment],
    k: usize,
    coords: &[usize],
    h: f64,
) -> Result<Vec<f64>> {
    let trace = run_chain(params, cfg, segments)?;
    let base = params.flat();
    let mut probe = params.clone();
    let mut out = Vec::with_capacity(coords.len());
    for &c in coords {
        let mut x = base.clone();
        x[c] = base[c] + h;
        probe.set_flat(&x)?;
        let up = loss_lk_frozen(&probe, cfg, segments, k, &trace)?;
        x[c] = base[c] - h;
        probe.set_flat(&x)?;
        let down = loss_lk_frozen(&probe, cfg, segments, k, &trace)?;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// Elementwise relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Largest elementwise [`rel_err`] of `a` against `b`, with the floor set to
/// `floor_frac · max|b|`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor_frac: f64) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y, floor_frac * scale)).fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// One row of the metric log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    /// Mean per-segment loss of the step's sample.
    pub loss: f64,
    pub grad_norm: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    pub log: Vec<MetricRow>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let n = params.num_params();
        Self { params, m: vec![0.0; n], v: vec![0.0; n], step: 0, log: Vec::new() }
    }

    pub fn adam_step(&mut self, grad: &[f64], opt: &AdamConfig) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - opt.beta1.powi(t);
        let c2 = 1.0 - opt.beta2.powi(t);
        let mut theta = self.params.flat();
        for (((x, g), m), v) in theta.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
            *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
            *x -= opt.lr * (*m / c1) / ((*v / c2).sqrt() + opt.eps);
        }
        self.params.set_flat(&theta)
    }
}

/// How a training sample is turned into a gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Segmented execution with truncation depth K.
    Aligned { k: usize },
    /// The whole sample as one causal segment: no carry, no retrieval.
    Misaligned,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub adam: AdamConfig,
    pub schedule: Schedule,
    /// Record wall-clock seconds in the log (otherwise 0, keeping logs reproducible).
    pub wall_clock: bool,
}

/// Gradient of one sample under a schedule.
pub fn sample_gradient(params: &ModelParams, cfg: &ModelConfig, sample: &[usize], schedule: Schedule) -> Result<SampleGradient> {
    match schedule {
        Schedule::Aligned { k } => tbptt_gradient(params, cfg, &segment_sample(sample, cfg.segment_len)?, k),
        Schedule::Misaligned => tbptt_gradient(params, cfg, &segment_sample(sample, sample.len())?, 0),
    }
}

/// Adam training over a stream of samples (`next_sample(step)`).
pub fn train<F>(params: ModelParams, cfg: &ModelConfig, mut next_sample: F, opts: &TrainOptions) -> Result<TrainState>
where
    F: FnMut(usize) -> Vec<usize>,
{
    if opts.steps == 0 {
        return Err(Error::Input("steps must be at least 1".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let mut state = TrainState::new(params);
    for step in 1..=opts.steps {
        let sample = next_sample(step);
        let sg = sample_gradient(&state.params, cfg, &sample, opts.schedule)?;
        let loss = sg.loss / sg.segment_losses.len() as f64;
        let grad_norm = sg.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::NonFinite { step, loss });
        }
        state.adam_step(&sg.grad, &opts.adam)?;
        let seconds = if opts.wall_clock { start.elapsed().as_secs_f64() } else { 0.0 };
        state.log.push(MetricRow { step, loss, grad_norm, seconds });
    }
    Ok(state)
}

/// Training with full-sequence causal attention; evaluate with the segmented loop.
pub fn train_misaligned<F>(params: ModelParams, cfg: &ModelConfig, next_sample: F, opts: &TrainOptions) -> Result<TrainState>
where
    F: FnMut(usize) -> Vec<usize>,
{
    let opts = TrainOptions { schedule: Schedule::Misaligned, ..opts.clone() };
    train(params, cfg, next_sample, &opts)
}

/// Evidence that retrieval is forward-only.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalAudit {
    /// Input leaves on segment tapes that are not carry tensors.
    pub foreign_leaves: usize,
    /// Retrieved prefix tensors found attached to a tape.
    pub attached_prefix_tensors: usize,
    /// Segments that consumed a non-empty prefix.
    pub segments_with_prefix: usize,
    /// Largest |∂ℓ_i/∂(pooled value)| by central differences.
    pub fd_sensitivity: f64,
}

/// Audit the training tapes for paths into pooled KV, and measure the
/// forward sensitivity of the loss to pooled values.
pub fn audit_retrieval(params: &ModelParams, cfg: &ModelConfig, sample: &[usize], h: f64) -> Result<RetrievalAudit> {
    let segments = segment_sample(sample, cfg.segment_len)?;
    let trace = run_chain(params, cfg, &segments)?;
    let mut audit =
        RetrievalAudit { foreign_leaves: 0, attached_prefix_tensors: 0, segments_with_prefix: 0, fd_sensitivity: 0.0 };
    for (idx, seg) in segments.iter().enumerate() {
        let i = idx + 1;
        let prefix = &trace.prefixes[idx];
        let mut tape = Tape::recording();
        let bound = params.bind(&mut tape);
        let carry_in = trace.carries[idx].attach_inputs(&mut tape);
        let run = forward_segment_on(&mut tape, &bound, cfg, &seg.inputs, seg.targets.as_deref(), &carry_in, prefix, i)?;
        let carry_nodes: Vec<_> = carry_in.tensors().iter().filter_map(|t| t.node()).collect();
        audit.foreign_leaves += tape.input_ids().iter().filter(|id| !carry_nodes.contains(id)).count();
        for slot in prefix.slots() {
            let kv = prefix.get(slot.0, slot.1).expect("slot listed");
            audit.attached_prefix_tensors += usize::from(kv.keys.is_attached()) + usize::from(kv.values.is_attached());
        }
        if prefix.is_empty() {
            continue;
        }
        audit.segments_with_prefix += 1;
        let base_loss = run.loss.as_ref().map(Tensor::item);
        let Some(_) = base_loss else { continue };
        for slot in prefix.slots().collect::<Vec<_>>() {
            let values = prefix.get(slot.0, slot.1).expect("slot listed").values.clone();
            for e in 0..values.len().min(8) {
                let eval = |delta: f64| -> Result<f64> {
                    let mut v = values.clone();
                    v.data_mut()[e] += delta;
                    let mut p = prefix.clone();
                    p.set_values(slot.0, slot.1, v)?;
                    let mut t = Tape::inactive();
                    let r = forward_segment_on(&mut t, params, cfg, &seg.inputs, seg.targets.as_deref(), &trace.carries[idx], &p, i)?;
                    Ok(r.loss.expect("targets").item())
                };
                let d = (eval(h)? - eval(-h)?) / (2.0 * h);
                audit.fd_sensitivity = audit.fd_sensitivity.max(d.abs());
            }
        }
    }
    Ok(audit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::executor::segment_sample;

    #[test]
    fn boundaries() {
        assert_eq!(truncation_boundary(3, 1), 1);
        assert_eq!(truncation_boundary(1, 5), 0);
        assert_eq!(truncation_boundary(3, 2), 0);
        let plan = TruncationPlan::new(4, 0);
        assert!((1..=4).all(|i| plan.unroll(i).is_empty()));
        let plan = TruncationPlan::new(4, 1);
        assert_eq!(plan.unroll(4), 3..4);
    }

    /// c_j = w c_{j-1} + θ x_j, ℓ_i = c_{i-1}², with θ = (w, θ).
    struct Scalar {
        w: f64,
        theta: f64,
        xs: Vec<f64>,
    }

    impl Scalar {
        fn carries(&self) -> Vec<f64> {
            let mut c = vec![0.0];
            for x in &self.xs {
                let prev = *c.last().unwrap();
                c.push(self.w * prev + self.theta * x);
            }
            c
        }
    }

    impl ChainSystem for Scalar {
        fn segments(&self) -> usize {
            self.xs.len()
        }

        fn param_count(&self) -> usize {
            2
        }

        fn step(&self, j: usize) -> Result<StepTape> {
            let mut tape = Tape::recording();
            let w = tape.param(&Tensor::scalar(self.w));
            let th = tape.param(&Tensor::scalar(self.theta));
            let c = tape.input(&Tensor::scalar(self.carries()[j - 1]));
            let loss = tape.mul(&c, &c)?;
            let wc = tape.mul(&w, &c)?;
            let tx = tape.scale(&th, self.xs[j - 1]);
            let out = tape.add(&wc, &tx)?;
            Ok(StepTape { tape, loss, carry_in: vec![c], carry_out: vec![out], params: vec![w, th] })
        }
    }

    #[test]
    fn scalar_chain_matches_hand_derivation() {
        let (w, th) = (0.7, -1.3);
        let xs = vec![0.5, 2.0, -1.0];
        let sys = Scalar { w, theta: th, xs: xs.clone() };
        // c1 = θx1, c2 = wθx1 + θx2. ℓ1 = 0, ℓ2 = c1², ℓ3 = c2².
        // K = 1: ℓ3 sees c2 through one step with c1 detached:
        // ∂ℓ3/∂θ = 2 c2 x2, ∂ℓ3/∂w = 2 c2 c1; ℓ2: ∂/∂θ = 2 c1 x1, ∂/∂w = 0.
        let c1 = th * xs[0];
        let c2 = w * c1 + th * xs[1];
        let g = adjoint_oracle(&sys, 1).unwrap();
        assert!((g[0] - 2.0 * c2 * c1).abs() < 1e-14);
        assert!((g[1] - (2.0 * c2 * xs[1] + 2.0 * c1 * xs[0])).abs() < 1e-14);
        // K = 2 adds the path through c1 into c2: 2 c2 w x1.
        let g = adjoint_oracle(&sys, 2).unwrap();
        assert!((g[1] - (2.0 * c2 * (xs[1] + w * xs[0]) + 2.0 * c1 * xs[0])).abs() < 1e-14);
        // K = 0: direct terms only, and every ℓ_i's direct θ-term is zero.
        assert_eq!(adjoint_oracle(&sys, 0).unwrap(), vec![0.0, 0.0]);
    }

    fn small() -> ModelConfig {
        let mut c = ModelConfig::desk();
        c.layers = 2;
        c.d_model = 16;
        c.d_ff = 16;
        c.vocab = 13;
        c.init_std = 0.3;
        c.partition = crate::attention::HeadPartition::new(4, 2, vec![2, 3], vec![0, 1], vec![1]).unwrap();
        c
    }

    fn sample(n: usize, salt: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 5 + salt * 3 + i * i) % 13).collect()
    }

    #[test]
    fn sequential_literal_and_oracle_agree() {
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        let segs = segment_sample(&sample(25, 1), cfg.segment_len).unwrap();
        for k in 0..3 {
            let seq = tbptt_gradient(&p, &cfg, &segs, k).unwrap();
            let lit = literal_gradient(&p, &cfg, &segs, k).unwrap();
            let orc = adjoint_oracle_gradient(&p, &cfg, &segs, k).unwrap();
            assert_eq!(seq.loss.to_bits(), lit.loss.to_bits());
            let scale = orc.iter().fold(0.0f64, |a, x| a.max(x.abs()));
            for ((a, b), c) in seq.grad.iter().zip(&lit.grad).zip(&orc) {
                assert!(rel_err(*a, *c, 1e-8 * scale) < 1e-10, "k={k}: {a} vs {c}");
                assert!(rel_err(*b, *c, 1e-8 * scale) < 1e-10, "k={k}: {b} vs {c}");
            }
        }
    }

    #[test]
    fn truncation_depth_changes_gradient_not_value() {
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        let segs = segment_sample(&sample(25, 2), cfg.segment_len).unwrap();
        let g0 = tbptt_gradient(&p, &cfg, &segs, 0).unwrap();
        let g2 = tbptt_gradient(&p, &cfg, &segs, 2).unwrap();
        assert_eq!(g0.loss.to_bits(), g2.loss.to_bits());
        assert!(g0.grad.iter().zip(&g2.grad).any(|(a, b)| a != b));
    }

    #[test]
    fn frozen_carry_makes_truncation_irrelevant() {
        let mut cfg = small();
        cfg.carry_len = 0;
        let p = ModelParams::init(&cfg).unwrap();
        let segs = segment_sample(&sample(25, 3), cfg.segment_len).unwrap();
        let g0 = tbptt_gradient(&p, &cfg, &segs, 0).unwrap();
        let g2 = tbptt_gradient(&p, &cfg, &segs, 2).unwrap();
        assert_eq!(g0.grad, g2.grad);
    }

    #[test]
    fn finite_differences_match() {
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        let segs = segment_sample(&sample(25, 4), cfg.segment_len).unwrap();
        let g = tbptt_gradient(&p, &cfg, &segs, 1).unwrap();
        let coords: Vec<usize> = (0..p.num_params()).step_by(p.num_params() / 10).collect();
        let fd = finite_diff_coords(&p, &cfg, &segs, 1, &coords, 1e-5).unwrap();
        for (&c, f) in coords.iter().zip(&fd) {
            assert!(rel_err(g.grad[c], *f, 1e-6) < 1e-4, "coord {c}: {} vs {f}", g.grad[c]);
        }
    }

    #[test]
    fn retrieval_has_no_gradient_path() {
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        let a = audit_retrieval(&p, &cfg, &sample(33, 5), 1e-5).unwrap();
        assert_eq!(a.foreign_leaves, 0);
        assert_eq!(a.attached_prefix_tensors, 0);
        assert!(a.segments_with_prefix >= 2);
        assert!(a.fd_sensitivity > 0.0);
    }

    #[test]
    fn training_is_deterministic_and_rejects_zero_steps() {
        let cfg = small();
        let p = ModelParams::init(&cfg).unwrap();
        let opts = TrainOptions { steps: 3, adam: AdamConfig::default(), schedule: Schedule::Aligned { k: 1 }, wall_clock: false };
        let a = train(p.clone(), &cfg, |s| sample(17, s), &opts).unwrap();
        let b = train(p.clone(), &cfg, |s| sample(17, s), &opts).unwrap();
        assert!(a.params.bits_eq(&b.params));
        assert_eq!(a.log, b.log);
        assert!(train(p, &cfg, |s| sample(17, s), &TrainOptions { steps: 0, ..opts }).is_err());
    }
}
