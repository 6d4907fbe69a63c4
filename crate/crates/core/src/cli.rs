//! Command-line interface.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::analysis::{self, BenchOptions, DEFAULT_TRACE_SAMPLES};
use crate::config::{config_hash, RunConfig};
use crate::error::Error;
use crate::model::{model_from_checkpoint, Checkpoint, ModelConfig, ModelParams, ModelStream};
use crate::tasks::{Sample, TaskData, TaskSpec};
use crate::train::{evaluate, Trainer};

#[derive(Parser, Debug)]
#[command(
    name = "seqboat",
    version,
    about = "Sparse modular activation sequence models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sequences to analyse or decode.
    #[arg(long)]
    pub samples: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train from a config; resumes when --checkpoint is given, continuing
    /// up to the config's step count.
    Train(Common),
    /// Evaluate a checkpoint on the task's eval split.
    Eval(Common),
    /// Write per-layer activation traces as JSON.
    Trace(Common),
    /// Write per-layer mean attention spans as CSV.
    Span(Common),
    /// Measure attention FLOPs, step time, and streaming latency.
    Bench(Common),
    /// Stream eval sequences token by token and report predictions.
    Decode(Common),
}

/// Parses `args` and runs the command; returns the process exit code.
/// Configuration errors exit with 2, other failures with 1.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::Trace(c) => cmd_trace(&c),
        Command::Span(c) => cmd_span(&c),
        Command::Bench(c) => cmd_bench(&c),
        Command::Decode(c) => cmd_decode(&c),
    }
}

fn load_config(c: &Common) -> anyhow::Result<Option<RunConfig>> {
    let Some(path) = &c.config else {
        return Ok(None);
    };
    let mut cfg = RunConfig::load(path).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        e => e,
    })?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    Ok(Some(cfg))
}

fn require_config(c: &Common) -> anyhow::Result<RunConfig> {
    load_config(c)?.ok_or_else(|| Error::Config("--config is required".into()).into())
}

fn out_dir(c: &Common, cfg: Option<&RunConfig>) -> anyhow::Result<PathBuf> {
    let dir = c
        .out
        .clone()
        .or_else(|| cfg.map(|r| r.out.clone()))
        .unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn save_trainer(trainer: &Trainer, task: &TaskSpec, path: &Path) -> anyhow::Result<()> {
    let mut ck = trainer.checkpoint()?;
    ck.header["task"] = serde_json::to_value(task)?;
    ck.save(path)
        .with_context(|| format!("saving {}", path.display()))?;
    Ok(())
}

fn cmd_train(c: &Common) -> anyhow::Result<()> {
    let cfg = require_config(c)?;
    let out = out_dir(c, Some(&cfg))?;
    let (data, model) = cfg.build()?;
    let mut trainer = match &c.checkpoint {
        Some(path) => {
            let mut t =
                Trainer::load(path).with_context(|| format!("resuming from {}", path.display()))?;
            if t.model != model {
                return Err(Error::Config("checkpoint model does not match [model]".into()).into());
            }
            // The config's step budget and optimiser settings win, so a run can be extended.
            t.train = cfg.train.clone();
            t.optim = cfg.optim.clone();
            t
        }
        None => Trainer::new(&model, &cfg.optim, &cfg.train, cfg.seed)?,
    };
    let ck_path = out.join("model.ckpt");
    let csv_path = out.join("report.csv");
    let result = trainer.run(&data);
    write(&csv_path, &trainer.report.to_csv(model.n_layers))?;
    save_trainer(&trainer, &cfg.task, &ck_path)?;
    let reason = result.context("training stopped; last good parameters saved")?;
    if let Some(row) = trainer.report.rows.last() {
        eprintln!(
            "{reason:?} at step {}: loss {:.4}, metric {:.4}",
            row.step, row.loss, row.metric
        );
    }
    Ok(())
}

/// Model and task from `--checkpoint`, with the task taken from `--config`
/// when given and otherwise from the checkpoint header.
fn load_model(
    c: &Common,
) -> anyhow::Result<(ModelConfig, ModelParams, TaskData, Option<RunConfig>)> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))?;
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, params) = model_from_checkpoint(&ck)?;
    let run = load_config(c)?;
    let data = match &run {
        Some(run) => {
            let data = TaskData::new(&run.task)?;
            let expected = run.model_config(&data)?;
            if expected != model {
                return Err(Error::Config(format!(
                    "checkpoint and config disagree on the model (checkpoint d_m={} n_layers={}, config d_m={} n_layers={})",
                    model.d_m, model.n_layers, expected.d_m, expected.n_layers
                ))
                .into());
            }
            data
        }
        None => {
            let task: TaskSpec = serde_json::from_value(ck.header["task"].clone())
                .map_err(|_| Error::Config("checkpoint has no task; pass --config".into()))?;
            TaskData::new(&task)?
        }
    };
    if data.vocab > model.vocab {
        bail!(
            "task vocabulary {} exceeds the model's {}",
            data.vocab,
            model.vocab
        );
    }
    Ok((model, params, data, run))
}

/// `k` sequences: a seeded random subset of the eval split, topped up with
/// training batches when the split is smaller than `k`.
pub fn sample_sequences(data: &TaskData, k: usize, seed: u64) -> crate::Result<Vec<Sample>> {
    let eval = data.eval_set();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if k <= eval.len() {
        let mut idx = sample(&mut rng, eval.len(), k).into_vec();
        idx.sort_unstable();
        return Ok(idx.into_iter().map(|i| eval[i].clone()).collect());
    }
    let mut out = eval.to_vec();
    let mut step = 0;
    while out.len() < k {
        out.extend(data.train_batch(1 << 30 | step, k - out.len())?);
        step += 1;
    }
    Ok(out)
}

fn cmd_eval(c: &Common) -> anyhow::Result<()> {
    let (model, params, data, run) = load_model(c)?;
    let samples = match c.samples {
        Some(k) => sample_sequences(&data, k, c.seed.unwrap_or(0))?,
        None => data.eval_set().to_vec(),
    };
    let result = evaluate(&params, &model, &samples)?;
    let json = serde_json::to_string_pretty(&result)?;
    println!("{json}");
    if c.out.is_some() {
        let out = out_dir(c, run.as_ref())?;
        write(&out.join("eval.json"), &(json + "\n"))?;
    }
    Ok(())
}

fn trace_for(
    c: &Common,
) -> anyhow::Result<(analysis::TraceReport, ModelConfig, Option<RunConfig>)> {
    let (model, params, data, run) = load_model(c)?;
    let k = c.samples.unwrap_or(DEFAULT_TRACE_SAMPLES);
    let samples = sample_sequences(&data, k, c.seed.unwrap_or(0))?;
    let traces = analysis::collect_traces(&params, &model, &samples)?;
    let hash = config_hash(&data.spec, &model);
    Ok((
        analysis::trace_report(&hash, &model.gau(), &traces)?,
        model,
        run,
    ))
}

fn cmd_trace(c: &Common) -> anyhow::Result<()> {
    let (report, _, run) = trace_for(c)?;
    let out = out_dir(c, run.as_ref())?;
    write(
        &out.join("trace.json"),
        &(serde_json::to_string(&report)? + "\n"),
    )
}

fn cmd_span(c: &Common) -> anyhow::Result<()> {
    let (report, _, run) = trace_for(c)?;
    let rows = analysis::span_rows(&report);
    let out = out_dir(c, run.as_ref())?;
    write(
        &out.join("span.csv"),
        &analysis::span_csv(&rows, &report.span_distance),
    )
}

fn cmd_bench(c: &Common) -> anyhow::Result<()> {
    let cfg = require_config(c)?;
    let (data, model) = cfg.build()?;
    let out = out_dir(c, Some(&cfg))?;
    let b = &cfg.bench;
    let opts = BenchOptions {
        n: b.n.unwrap_or(data.max_len()),
        rates: b.rates.clone(),
        steps: b.steps,
        warmup: b.warmup,
        tokens: b.tokens,
        flops_only: false,
        seed: cfg.seed,
    };
    let rows = analysis::bench(&model, &opts)?;
    let csv = analysis::bench_csv(&rows);
    print!("{csv}");
    write(&out.join("bench.csv"), &csv)
}

fn cmd_decode(c: &Common) -> anyhow::Result<()> {
    let (model, params, data, run) = load_model(c)?;
    let k = c.samples.unwrap_or(16);
    let samples = sample_sequences(&data, k, c.seed.unwrap_or(0))?;
    let mut csv = String::from("sample,position,target,predicted\n");
    let (mut correct, mut total) = (0, 0);
    for (i, s) in samples.iter().enumerate() {
        let mut stream = ModelStream::new(&params, &model)?;
        for (t, &tok) in s.inputs.iter().enumerate() {
            let logits = stream.step(tok)?;
            if s.mask[t] {
                let pred =
                    (0..logits.len()).fold(0, |b, j| if logits[j] > logits[b] { j } else { b });
                csv.push_str(&format!("{i},{t},{},{pred}\n", s.targets[t]));
                correct += usize::from(pred == s.targets[t]);
                total += 1;
            }
        }
    }
    eprintln!("streamed accuracy {correct}/{total}");
    let out = out_dir(c, run.as_ref())?;
    write(&out.join("decode.csv"), &csv)
}
