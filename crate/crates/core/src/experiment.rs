//! Experiment presets: training variants on the synthetic tasks, evaluation,
//! the oracle suite, and the CSV / checkpoint / pool artifacts they write.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::save_checkpoint;
use crate::config::ModelConfig;
use crate::cost::{attention_time_estimate, effective_context, fmt_q, peak_kv_len, pool_growth, schedule_macs, CostInputs, Q};
use crate::error::{Error, Result};
use crate::executor::{argmax, run_chain, run_inference, segment_sample, ChainTrace};
use crate::model::{forward_segment, Mode, ModelParams};
use crate::synth::{gen_local_lm, gen_planted_recall, RecallLayout};
use crate::tensor::Tensor;
use crate::trainer::{
    adjoint_oracle_gradient, audit_retrieval, finite_diff_coords, max_rel_err, tbptt_gradient, train, AdamConfig, MetricRow,
    Schedule, TrainOptions,
};

pub const CSV_HEADER: &str = "# segtide-csv v1";

/// Tokens the local-LM task draws from (capped by the model vocabulary).
pub const LOCAL_VOCAB: usize = 16;

pub const PRESETS: &[&str] =
    &["desk", "paper", "verify", "ablate-alignment", "ablate-k", "sweep-capacity", "sweep-long-layers", "recall"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    LocalLm,
    PlantedRecall,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub preset: String,
    pub config: ModelConfig,
    pub task: Task,
    /// Held-out evaluation samples.
    pub samples: usize,
    /// Tokens per sample (`T + 1`).
    pub sample_len: usize,
    pub steps: usize,
    /// Data and initialisation seed.
    pub seed: u64,
    pub lr: f64,
    pub out: Option<PathBuf>,
}

impl ExperimentSpec {
    pub fn preset(name: &str) -> Result<Self> {
        let desk = ModelConfig::desk();
        let local = |steps| Self {
            preset: name.to_string(),
            config: desk.clone(),
            task: Task::LocalLm,
            samples: 20,
            sample_len: 16 * desk.segment_len + 1,
            steps,
            seed: 0,
            lr: AdamConfig::default().lr,
            out: None,
        };
        match name {
            "desk" | "ablate-alignment" | "ablate-k" | "sweep-capacity" | "sweep-long-layers" => Ok(local(300)),
            "verify" => Ok(Self { samples: 1, sample_len: 4 * desk.segment_len + 1, ..local(0) }),
            "paper" => Ok(Self { config: ModelConfig::paper(), sample_len: 32 * 4096 + 1, ..local(0) }),
            "recall" => Ok(Self {
                task: Task::PlantedRecall,
                samples: 200,
                sample_len: 3 * desk.segment_len + 1,
                ..local(3000)
            }),
            other => Err(Error::Config(format!("unknown preset '{other}'; expected one of {}", PRESETS.join(", ")))),
        }
    }

    /// Validate the experiment before any compute.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.sample_len < 2 {
            return Err(Error::Spec(format!("sample length {} < 2", self.sample_len)));
        }
        if self.samples == 0 {
            return Err(Error::Spec("at least one evaluation sample is required".into()));
        }
        if self.task == Task::PlantedRecall {
            let layout = recall_layout(&self.config);
            recall_sample(&self.config, &layout, self.sample_len, 0, layout_gap(&layout, 0))?;
        }
        Ok(())
    }
}

/// One trained configuration inside a preset.
#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: ModelConfig,
    pub schedule: Schedule,
}

pub fn variants(spec: &ExperimentSpec) -> Result<Vec<Variant>> {
    let cfg = &spec.config;
    let aligned = |k: usize, c: &ModelConfig| Variant { name: format!("aligned-k{k}"), config: c.clone(), schedule: Schedule::Aligned { k } };
    let k = cfg.truncation;
    let out = match spec.preset.as_str() {
        "desk" => vec![aligned(k, cfg)],
        "ablate-alignment" => vec![
            aligned(1, cfg),
            Variant { name: "misaligned".into(), config: cfg.clone(), schedule: Schedule::Misaligned },
            aligned(2, cfg),
        ],
        "ablate-k" => (0..=2).map(|k| aligned(k, cfg)).collect(),
        "sweep-capacity" => {
            if 2 * cfg.carry_len > cfg.segment_len {
                return Err(Error::Config(format!("capacity sweep needs 2M={} <= S={}", 2 * cfg.carry_len, cfg.segment_len)));
            }
            [0, cfg.carry_len, 2 * cfg.carry_len]
                .iter()
                .map(|&m| {
                    let c = ModelConfig { carry_len: m, ..cfg.clone() };
                    Variant { name: format!("carry-{m}"), ..aligned(k, &c) }
                })
                .collect()
        }
        "sweep-long-layers" => {
            let all = &cfg.partition.long_layers;
            if all.len() < 2 {
                return Err(Error::Config("long-layer sweep needs at least two long-range layers".into()));
            }
            (0..=2)
                .map(|n| {
                    let mut c = cfg.clone();
                    c.partition.long_layers = all[all.len() - n..].to_vec();
                    Variant { name: format!("long-layers-{n}"), ..aligned(k, &c) }
                })
                .collect()
        }
        "recall" => vec![
            Variant { name: "retrieval-on".into(), ..aligned(k, cfg) },
            Variant { name: "retrieval-off".into(), ..aligned(k, &cfg.without_retrieval()) },
        ],
        "verify" | "paper" => Vec::new(),
        other => return Err(Error::Config(format!("unknown preset '{other}'"))),
    };
    Ok(out)
}

fn local_vocab(cfg: &ModelConfig) -> usize {
    LOCAL_VOCAB.min(cfg.vocab)
}

const EVAL_SEED_BASE: u64 = 1 << 40;

fn stream_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn recall_layout(cfg: &ModelConfig) -> RecallLayout {
    RecallLayout { segment_len: cfg.segment_len, carry_len: cfg.carry_len, cue_len: 4, keys: 8, noise_branch: 3 }
}

/// Gaps cycle over `S + M ..= 2S - 1`, so the query opens the third segment.
fn layout_gap(layout: &RecallLayout, i: usize) -> usize {
    let span = (layout.segment_len - layout.carry_len).max(1);
    layout.segment_len + layout.carry_len + i % span
}

fn recall_sample(cfg: &ModelConfig, layout: &RecallLayout, len: usize, seed: u64, gap: usize) -> Result<crate::synth::SyntheticSample> {
    gen_planted_recall(seed, len, cfg.vocab, gap, layout)
}

/// Training sample `i` of a run.
pub fn train_sample(task: Task, cfg: &ModelConfig, len: usize, seed: u64, i: usize) -> Result<Vec<usize>> {
    match task {
        Task::LocalLm => Ok(gen_local_lm(stream_seed(seed, i), len, local_vocab(cfg))?.tokens),
        Task::PlantedRecall => {
            let layout = recall_layout(cfg);
            Ok(recall_sample(cfg, &layout, len, stream_seed(seed, i), layout_gap(&layout, i))?.tokens)
        }
    }
}

/// Held-out sample `i`, disjoint from every training stream.
pub fn eval_sample(task: Task, cfg: &ModelConfig, len: usize, seed: u64, i: usize) -> Result<crate::synth::SyntheticSample> {
    let s = EVAL_SEED_BASE + stream_seed(seed, i);
    match task {
        Task::LocalLm => gen_local_lm(s, len, local_vocab(cfg)),
        Task::PlantedRecall => {
            let layout = recall_layout(cfg);
            recall_sample(cfg, &layout, len, s, layout_gap(&layout, i))
        }
    }
}

/// Mean per-segment loss of the segmented loop over held-out samples.
pub fn eval_loss(params: &ModelParams, cfg: &ModelConfig, task: Task, len: usize, seed: u64, n: usize) -> Result<f64> {
    let mut total = 0.0;
    for i in 0..n {
        total += run_inference(params, cfg, &eval_sample(task, cfg, len, seed, i)?.tokens)?.mean_loss();
    }
    Ok(total / n as f64)
}

/// Greedy answer accuracy at the recall query through the segmented loop.
pub fn eval_recall(params: &ModelParams, cfg: &ModelConfig, len: usize, seed: u64, n: usize) -> Result<f64> {
    let mut hits = 0;
    for i in 0..n {
        let s = eval_sample(Task::PlantedRecall, cfg, len, seed, i)?;
        let meta = s.recall.ok_or_else(|| Error::Spec("recall sample without metadata".into()))?;
        let trace = run_inference(params, cfg, &s.tokens[..meta.query_pos + 2])?;
        let last = trace.logits.last().expect("at least one segment");
        if argmax(last.row(last.rows() - 1)) == meta.answer_token {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub name: String,
    pub config: ModelConfig,
    pub params: ModelParams,
    pub log: Vec<MetricRow>,
    pub eval_loss: f64,
    pub accuracy: Option<f64>,
}

pub fn run_variant(spec: &ExperimentSpec, v: &Variant) -> Result<VariantResult> {
    let cfg = ModelConfig { seed: spec.seed, ..v.config.clone() };
    cfg.validate()?;
    let init = ModelParams::init(&cfg)?;
    let opts = TrainOptions {
        steps: spec.steps,
        adam: AdamConfig { lr: spec.lr, ..AdamConfig::default() },
        schedule: v.schedule,
        wall_clock: false,
    };
    let mut failure = None;
    let state = train(init, &cfg, |i| match train_sample(spec.task, &cfg, spec.sample_len, spec.seed, i) {
        Ok(s) => s,
        Err(e) => {
            failure.get_or_insert(e);
            vec![0, 0]
        }
    }, &opts)?;
    if let Some(e) = failure {
        return Err(e);
    }
    let eval_loss = eval_loss(&state.params, &cfg, spec.task, spec.sample_len, spec.seed, spec.samples)?;
    let accuracy = match spec.task {
        Task::PlantedRecall => Some(eval_recall(&state.params, &cfg, spec.sample_len, spec.seed, spec.samples)?),
        Task::LocalLm => None,
    };
    Ok(VariantResult { name: v.name.clone(), config: cfg, params: state.params, log: state.log, eval_loss, accuracy })
}

/// One named check of the oracle suite.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
}

impl Check {
    fn below(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value < limit }
    }

    fn above(name: &str, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, limit, pass: value > limit }
    }

    fn equal(name: &str, diff: u64) -> Self {
        Self { name: name.into(), value: diff as f64, limit: 0.0, pass: diff == 0 }
    }
}

/// Max bitwise mismatch count between training- and inference-mode logits
/// along a reference chain.
pub fn forward_identity_mismatches(params: &ModelParams, cfg: &ModelConfig, sample: &[usize]) -> Result<usize> {
    let segments = segment_sample(sample, cfg.segment_len)?;
    let trace = run_chain(params, cfg, &segments)?;
    let mut bad = 0;
    for (i, seg) in segments.iter().enumerate() {
        let (run, _) = forward_segment(
            params,
            cfg,
            &seg.inputs,
            seg.targets.as_deref(),
            &trace.carries[i],
            &trace.prefixes[i],
            i + 1,
            Mode::Training,
        )?;
        bad += bit_mismatches(&run.logits, &trace.logits[i]);
    }
    Ok(bad)
}

fn bit_mismatches(a: &Tensor, b: &Tensor) -> usize {
    if a.shape() != b.shape() {
        return a.len().max(b.len());
    }
    a.data().iter().zip(b.data()).filter(|(x, y)| x.to_bits() != y.to_bits()).count()
}

/// Measured counters against the cost model for one chain.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterReport {
    /// Segments (after the first) whose visible KV length differs from the peak model.
    pub kv_mismatches: usize,
    pub macs_measured: u64,
    pub macs_schedule: u64,
    /// MACs of segments after the first.
    pub steady_macs_measured: u64,
    /// Closed form for the tokens of those segments.
    pub steady_macs_model: Q,
    pub pool_rows_measured: u64,
    pub pool_rows_model: Q,
}

impl CounterReport {
    pub fn exact(&self) -> bool {
        self.kv_mismatches == 0
            && self.macs_measured == self.macs_schedule
            && Q::from_integer(self.steady_macs_measured) == self.steady_macs_model
            && Q::from_integer(self.pool_rows_measured) == self.pool_rows_model
    }
}

pub fn counter_report(cfg: &ModelConfig, trace: &ChainTrace) -> CounterReport {
    let t: usize = trace.counters.iter().map(|c| c.tokens).sum();
    let inputs = CostInputs::from_config(cfg, t as u64);
    let pk = peak_kv_len(&inputs);
    let part = &cfg.partition;
    let mut kv_mismatches = 0;
    let mut steady_tokens = 0u64;
    let mut steady_macs = 0u64;
    for c in trace.counters.iter().skip(1) {
        steady_tokens += c.tokens as u64;
        steady_macs += c.attn_macs;
        if c.tokens != cfg.segment_len {
            continue;
        }
        let wrong = c.kv_len.iter().any(|(&(l, h), &n)| {
            let want = if part.is_local(h) {
                pk.local
            } else if part.is_long_layer(l) {
                pk.long_enabled
            } else {
                pk.long_other
            };
            n as u64 != want
        });
        kv_mismatches += usize::from(wrong);
    }
    CounterReport {
        kv_mismatches,
        macs_measured: trace.counters.iter().map(|c| c.attn_macs).sum(),
        macs_schedule: schedule_macs(cfg, t),
        steady_macs_measured: steady_macs,
        steady_macs_model: attention_time_estimate(&CostInputs { t: steady_tokens, ..inputs.clone() }),
        pool_rows_measured: trace.pool.total_rows() as u64,
        pool_rows_model: pool_growth(&inputs, t as u64),
    }
}

/// The oracle suite on the experiment configuration.
pub fn verify_suite(spec: &ExperimentSpec) -> Result<Vec<Check>> {
    let cfg = ModelConfig { seed: spec.seed, ..spec.config.clone() };
    let params = ModelParams::init(&cfg)?;
    let sample = gen_local_lm(EVAL_SEED_BASE + spec.seed, spec.sample_len, local_vocab(&cfg))?.tokens;
    let segments = segment_sample(&sample, cfg.segment_len)?;
    let mut checks = Vec::new();
    let mut g1 = None;
    for k in 0..=2 {
        let g = tbptt_gradient(&params, &cfg, &segments, k)?.grad;
        let oracle = adjoint_oracle_gradient(&params, &cfg, &segments, k)?;
        checks.push(Check::below(&format!("tbptt_vs_adjoint_k{k}"), max_rel_err(&g, &oracle, 1e-8), 1e-10));
        if k == 1 {
            g1 = Some(g);
        }
    }
    let g1 = g1.expect("k = 1 computed");
    let n = g1.len();
    let coords: Vec<usize> = (0..20).map(|i| (i * 7919 + spec.seed as usize * 31) % n).collect();
    let fd = finite_diff_coords(&params, &cfg, &segments, 1, &coords, 1e-5)?;
    let picked: Vec<f64> = coords.iter().map(|&c| g1[c]).collect();
    let scale = g1.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let fd_err = fd
        .iter()
        .zip(&picked)
        .map(|(a, b)| crate::trainer::rel_err(*a, *b, 1e-5 * scale))
        .fold(0.0, f64::max);
    checks.push(Check::below("tbptt_vs_finite_diff_k1", fd_err, 1e-4));
    checks.push(Check::equal("forward_identity_mismatches", forward_identity_mismatches(&params, &cfg, &sample)? as u64));
    let audit = audit_retrieval(&params, &cfg, &sample, 1e-5)?;
    checks.push(Check::equal("retrieval_grad_edges", (audit.foreign_leaves + audit.attached_prefix_tensors) as u64));
    checks.push(Check::above("retrieval_fd_sensitivity", audit.fd_sensitivity, 0.0));
    let report = counter_report(&cfg, &run_chain(&params, &cfg, &segments)?);
    checks.push(Check::equal("counter_identity", u64::from(!report.exact())));
    Ok(checks)
}

/// One cost CSV row: closed forms plus, when available, the measured counters.
pub fn cost_row(cfg: &ModelConfig, t: usize, measured: Option<&ChainTrace>) -> Vec<String> {
    let c = CostInputs::from_config(cfg, t as u64);
    let pk = peak_kv_len(&c);
    let (flops_measured, pool_measured) = match measured {
        Some(tr) => {
            let r = counter_report(cfg, tr);
            (r.macs_measured.to_string(), r.pool_rows_measured.to_string())
        }
        None => (String::new(), String::new()),
    };
    vec![
        t.to_string(),
        c.s.to_string(),
        c.m.to_string(),
        c.r.to_string(),
        fmt_q(&c.alpha),
        fmt_q(&c.beta),
        fmt_q(&effective_context(&c)),
        pk.local.to_string(),
        pk.long_enabled.to_string(),
        fmt_q(&attention_time_estimate(&c)),
        schedule_macs(cfg, t).to_string(),
        flops_measured,
        fmt_q(&pool_growth(&c, t as u64)),
        pool_measured,
    ]
}

pub const COST_COLUMNS: &[&str] = &[
    "T",
    "S",
    "M",
    "R",
    "alpha",
    "beta",
    "eff_ctx",
    "peak_kv_local",
    "peak_kv_long_enabled",
    "flops_closed_form",
    "flops_schedule",
    "flops_measured",
    "pool_rows_model",
    "pool_rows_measured",
];

/// Write a versioned CSV.
pub fn write_csv<S: AsRef<str>>(path: &Path, columns: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    writeln!(file, "{CSV_HEADER}")?;
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(columns).map_err(csv_err)?;
    for r in rows {
        w.write_record(r.iter().map(|s| s.as_ref())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn metrics_rows(log: &[MetricRow]) -> Vec<Vec<String>> {
    log.iter()
        .map(|r| vec![r.step.to_string(), r.loss.to_string(), r.grad_norm.to_string(), r.seconds.to_string()])
        .collect()
}

/// What a preset produced.
#[derive(Clone, Debug, Default)]
pub struct Report {
    pub variants: Vec<VariantResult>,
    pub checks: Vec<Check>,
    pub cost_rows: Vec<Vec<String>>,
}

impl Report {
    pub fn result(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }
}

/// Run a preset and write its artifacts when `spec.out` is set.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Report> {
    spec.validate()?;
    let mut report = Report::default();
    match spec.preset.as_str() {
        "verify" => {
            report.checks = verify_suite(spec)?;
            let cfg = ModelConfig { seed: spec.seed, ..spec.config.clone() };
            let params = ModelParams::init(&cfg)?;
            let t = spec.sample_len - 1;
            let trace = run_inference(&params, &cfg, &eval_sample(Task::LocalLm, &cfg, spec.sample_len, spec.seed, 0)?.tokens)?;
            report.cost_rows.push(cost_row(&cfg, t, Some(&trace)));
        }
        "paper" => {
            let s = spec.config.segment_len;
            for t in [s, 4 * s, spec.sample_len - 1] {
                report.cost_rows.push(cost_row(&spec.config, t, None));
            }
        }
        _ => {
            for v in variants(spec)? {
                let r = run_variant(spec, &v)?;
                let sample = eval_sample(spec.task, &r.config, spec.sample_len, spec.seed, 0)?;
                let trace = run_inference(&r.params, &r.config, &sample.tokens)?;
                report.cost_rows.push(cost_row(&r.config, spec.sample_len - 1, Some(&trace)));
                if let Some(dir) = &spec.out {
                    fs::create_dir_all(dir)?;
                    write_csv(&dir.join(format!("metrics_{}.csv", r.name)), &["step", "loss", "grad_norm", "seconds"], &metrics_rows(&r.log))?;
                    save_checkpoint(&dir.join(format!("checkpoint_{}.bin", r.name)), &r.config, &r.params)?;
                    trace.pool.dump(BufWriter::new(File::create(dir.join(format!("pool_{}.bin", r.name)))?))?;
                }
                report.variants.push(r);
            }
        }
    }
    if let Some(dir) = &spec.out {
        fs::create_dir_all(dir)?;
        write_csv(&dir.join("cost.csv"), COST_COLUMNS, &report.cost_rows)?;
        if !report.checks.is_empty() {
            let rows: Vec<Vec<String>> = report
                .checks
                .iter()
                .map(|c| vec![c.name.clone(), c.value.to_string(), c.limit.to_string(), c.pass.to_string()])
                .collect();
            write_csv(&dir.join("verify.csv"), &["check", "value", "limit", "pass"], &rows)?;
        }
        if !report.variants.is_empty() {
            let rows: Vec<Vec<String>> = report
                .variants
                .iter()
                .map(|v| {
                    let last = v.log.last().map_or(String::new(), |r| r.loss.to_string());
                    vec![v.name.clone(), last, v.eval_loss.to_string(), v.accuracy.map_or(String::new(), |a| a.to_string())]
                })
                .collect();
            write_csv(&dir.join("results.csv"), &["variant", "final_train_loss", "eval_loss", "eval_accuracy"], &rows)?;
        }
    }
    if let Some(bad) = report.checks.iter().find(|c| !c.pass) {
        return Err(Error::Invariant(format!("{} = {} (limit {})", bad.name, bad.value, bad.limit)));
    }
    Ok(report)
}
