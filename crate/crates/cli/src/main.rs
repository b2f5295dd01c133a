use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use segtide::checkpoint::load_checkpoint;
use segtide::experiment::{
    cost_row, eval_loss, eval_recall, eval_sample, run_experiment, write_csv, ExperimentSpec, Report, Task, COST_COLUMNS,
};
use segtide::{run_inference, ModelConfig};

#[derive(Parser)]
#[command(name = "segtide", version, about = "Segmented decoder training and evaluation harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gradient, forward-identity, retrieval and counter checks.
    Verify(Common),
    /// Train one configuration on the synthetic task.
    Train(Common),
    /// Evaluate a checkpoint on held-out samples.
    Eval(Common),
    /// Run an ablation or sweep preset.
    Sweep(Common),
    /// Write the cost report for a configuration.
    Cost {
        #[command(flatten)]
        common: Common,
        /// Token counts to report (defaults to the preset's sample length).
        #[arg(long = "tokens", value_delimiter = ',')]
        tokens: Vec<usize>,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Model config file (key = value sections); replaces the preset's model.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// Truncation depth K.
    #[arg(long)]
    k: Option<usize>,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn build_spec(c: &Common, default_preset: &str) -> Result<ExperimentSpec> {
    let mut spec = ExperimentSpec::preset(c.preset.as_deref().unwrap_or(default_preset))?;
    if let Some(path) = &c.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        spec.config = ModelConfig::from_text(&text)?;
    }
    if let Some(k) = c.k {
        spec.config.truncation = k;
    }
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    if let Some(n) = c.steps {
        spec.steps = n;
    }
    spec.out = c.out.clone();
    spec.validate()?;
    Ok(spec)
}

fn print_report(r: &Report) {
    for c in &r.checks {
        println!("{:<32} {:>12.3e}  limit {:>9.1e}  {}", c.name, c.value, c.limit, if c.pass { "PASS" } else { "FAIL" });
    }
    for v in &r.variants {
        let acc = v.accuracy.map_or(String::new(), |a| format!("  accuracy {a:.3}"));
        println!("{:<16} eval loss {:.6}{acc}", v.name, v.eval_loss);
    }
}

fn run_preset(c: &Common, default_preset: &str, allowed: &[&str]) -> Result<()> {
    let spec = build_spec(c, default_preset)?;
    if !allowed.contains(&spec.preset.as_str()) {
        bail!("preset '{}' is not valid here; expected one of {}", spec.preset, allowed.join(", "));
    }
    let report = run_experiment(&spec)?;
    print_report(&report);
    Ok(())
}

fn eval(c: &Common) -> Result<()> {
    let path = c.checkpoint.as_ref().context("eval needs --checkpoint PATH")?;
    let (cfg, params) = load_checkpoint(path)?;
    let mut spec = build_spec(c, "desk")?;
    spec.config = cfg.clone();
    let loss = eval_loss(&params, &cfg, spec.task, spec.sample_len, spec.seed, spec.samples)?;
    let acc = match spec.task {
        Task::PlantedRecall => Some(eval_recall(&params, &cfg, spec.sample_len, spec.seed, spec.samples)?),
        Task::LocalLm => None,
    };
    println!("eval loss {loss:.6}{}", acc.map_or(String::new(), |a| format!("  accuracy {a:.3}")));
    if let Some(dir) = &spec.out {
        fs::create_dir_all(dir)?;
        let row = vec![loss.to_string(), acc.map_or(String::new(), |a| a.to_string())];
        write_csv(&dir.join("eval.csv"), &["eval_loss", "eval_accuracy"], &[row])?;
        let trace = run_inference(&params, &cfg, &eval_sample(spec.task, &cfg, spec.sample_len, spec.seed, 0)?.tokens)?;
        write_csv(&dir.join("cost.csv"), COST_COLUMNS, &[cost_row(&cfg, spec.sample_len - 1, Some(&trace))])?;
        trace.pool.dump(BufWriter::new(File::create(dir.join("pool.bin"))?))?;
    }
    Ok(())
}

fn cost(c: &Common, tokens: &[usize]) -> Result<()> {
    let spec = build_spec(c, "desk")?;
    let ts = if tokens.is_empty() { vec![spec.sample_len - 1] } else { tokens.to_vec() };
    let rows: Vec<Vec<String>> = ts.iter().map(|&t| cost_row(&spec.config, t, None)).collect();
    match &spec.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_csv(&dir.join("cost.csv"), COST_COLUMNS, &rows)?;
        }
        None => {
            println!("{}", COST_COLUMNS.join(","));
            for r in rows {
                println!("{}", r.join(","));
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = dispatch(&Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Verify(c) => run_preset(c, "verify", &["verify"]),
        Command::Train(c) => run_preset(c, "desk", &["desk", "recall"]),
        Command::Eval(c) => eval(c),
        Command::Sweep(c) => run_preset(
            c,
            "ablate-alignment",
            &["ablate-alignment", "ablate-k", "sweep-capacity", "sweep-long-layers", "recall"],
        ),
        Command::Cost { common, tokens } => cost(common, tokens),
    }
}
