//! `synth`: train, evaluate, benchmark and inspect synthesizer models.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use synth_core::attention::{cost_table_csv, parse_variant, CostRow, SynthesizerSpec, VariantDefaults};
use synth_core::bench::{bench, bench_csv, BenchConfig};
use synth_core::checkpoint::Checkpoint;
use synth_core::config::{RunConfig, RunLock};
use synth_core::export::{export_attention, export_histogram};
use synth_core::forward::AttentionRole;
use synth_core::model::ModelMode;
use synth_core::task::Split;
use synth_core::trainer::{evaluate, MetricRecord};
use synth_core::Trainer;

const CHECKPOINT: &str = "checkpoint.bin";
const METRICS: &str = "metrics.jsonl";
const CONFIG_ECHO: &str = "config.txt";

#[derive(Parser)]
#[command(name = "synth", version, about = "Synthesizer attention models on toy tasks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model described by a config file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its validation split.
    Eval(EvalArgs),
    /// Time single attention layers across sequence lengths.
    Bench(BenchArgs),
    /// Export attention heatmaps and weight histograms from a checkpoint.
    Inspect(InspectArgs),
    /// Print synthesizer parameter and FLOP counts.
    Params(ParamsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Continue from the checkpoint already in the output directory.
    #[arg(long)]
    resume: bool,
    /// Suppress per-evaluation lines on stdout.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Config to check the checkpoint against (defaults to its own).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated variant names.
    #[arg(long, value_delimiter = ',', default_value = "dot_product,random,factorized_random,dense,factorized_dense")]
    variants: Vec<String>,
    #[arg(long, value_delimiter = ',', default_value = "64,128,256,512")]
    lens: Vec<usize>,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Time forward and backward passes.
    #[arg(long)]
    backward: bool,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory for the exports (default: `inspect/` next to the checkpoint).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validation example whose heatmaps are written.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    /// Histogram bins (default: `hist_bins` from the run config).
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Variant name, e.g. `random` or `dense+random`.
    #[arg(long, conflicts_with = "config")]
    variant: Option<String>,
    /// Maximum sequence length N.
    #[arg(long, default_value_t = 32)]
    n: usize,
    #[arg(long, default_value_t = 64)]
    d: usize,
    #[arg(long, default_value_t = 1)]
    heads: usize,
    /// Rank of factorized random heads.
    #[arg(long)]
    k: Option<usize>,
    /// Cost table for the self-attention variants of a run config.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Problems with the invocation itself rather than the run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn load_config(path: &Path) -> Result<RunConfig> {
    if !path.is_file() {
        return Err(usage(format!("config file {} does not exist", path.display())));
    }
    RunConfig::load(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => run_bench(a),
        Command::Inspect(a) => inspect(a),
        Command::Params(a) => params(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(out) = args.out {
        config.out_dir = out;
    }
    let dir = config.out_dir.clone();
    let ckpt_path = dir.join(CHECKPOINT);
    if ckpt_path.exists() && !args.resume {
        return Err(usage(format!(
            "{} already holds a checkpoint; pass --resume to continue it",
            dir.display()
        )));
    }
    if args.resume && !ckpt_path.exists() {
        return Err(usage(format!("--resume: no checkpoint in {}", dir.display())));
    }
    let _lock = RunLock::acquire(&dir).with_context(|| format!("locking {}", dir.display()))?;
    fs::write(dir.join(CONFIG_ECHO), config.emit()).context("writing config echo")?;

    let mut trainer: Trainer = if args.resume {
        Checkpoint::load(&ckpt_path)?.trainer(&config)?
    } else {
        let model = synth_core::Model::new(config.model_config()?, config.seed)?;
        Trainer::new(model, config.task()?, config.train_config())?
    };
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(dir.join(METRICS))
        .context("opening metrics log")?;
    let quiet = args.quiet;
    let log = trainer.run(|t: &Trainer, r: &MetricRecord| -> Result<()> {
        let line = r.to_json();
        writeln!(metrics, "{line}")?;
        if !quiet {
            println!("{line}");
        }
        Checkpoint::capture(t, &config).save(&ckpt_path)?;
        Ok(())
    });
    let log = log.context("training aborted")?;
    if log.records.is_empty() {
        // nothing left to do; keep the checkpoint current anyway
        Checkpoint::capture(&trainer, &config).save(&ckpt_path)?;
    }
    if trainer.stopped_early {
        eprintln!("stopped early at step {}", trainer.step());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let config = match &args.config {
        Some(p) => load_config(p)?,
        None => ckpt.run_config()?,
    };
    let model: synth_core::Model = ckpt.model(&config)?;
    let task = config.task()?;
    let batches = task.val_batches(model.config.mode, config.eval_batch_size)?;
    let m = evaluate(&model, &batches, task.decoding(model.config.mode))?;
    println!("{}", MetricRecord::new(ckpt.header.step, m, ckpt.header.secs).to_json());
    Ok(())
}

fn run_bench(args: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        d_model: args.d,
        heads: args.heads,
        lens: args.lens,
        reps: args.reps,
        backward: args.backward,
        ..BenchConfig::default()
    };
    if cfg.reps < 3 {
        return Err(usage("--reps must be at least 3"));
    }
    let names: Vec<&str> = args.variants.iter().map(String::as_str).collect();
    let csv = bench_csv(&bench::<f64>(&names, &cfg)?);
    print!("{csv}");
    if let Some(out) = args.out {
        fs::write(&out, &csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn inspect(args: InspectArgs) -> Result<()> {
    if !args.checkpoint.is_file() {
        return Err(usage(format!("checkpoint {} does not exist", args.checkpoint.display())));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let config = ckpt.run_config()?;
    let model: synth_core::Model = ckpt.model(&config)?;
    let task = config.task()?;
    let mode = model.config.mode;
    let dir = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("inspect")
    });
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let count = task.val_size.min(config.eval_batch_size).max(args.sample + 1);
    if args.sample >= task.val_size {
        return Err(usage(format!("--sample {} but the validation split has {}", args.sample, task.val_size)));
    }
    let batch = task.batch(mode, &task.generate(Split::Val, 0, count.min(task.val_size)))?;
    let mut roles = Vec::new();
    if mode != ModelMode::Decoder {
        roles.push(AttentionRole::EncoderSelf);
    }
    if mode != ModelMode::Encoder {
        roles.push(AttentionRole::DecoderSelf);
    }
    if mode == ModelMode::EncDec {
        roles.push(AttentionRole::DecoderCross);
    }
    for role in roles {
        for layer in 0..model.config.layers {
            for head in 0..model.config.heads {
                let path = export_attention(&model, &batch, role, layer, head, args.sample, &dir)?;
                println!("{}", path.display());
            }
        }
    }
    let bins = args.bins.unwrap_or(config.hist_bins);
    if bins < 2 {
        return Err(usage("--bins must be at least 2"));
    }
    let batches = task.val_batches(mode, config.eval_batch_size)?;
    let hist = dir.join("histograms.json");
    export_histogram(&model, &batches, bins, ckpt.header.step, &hist)?;
    println!("{}", hist.display());
    Ok(())
}

fn params(args: ParamsArgs) -> Result<()> {
    if let Some(path) = &args.config {
        let config = load_config(path)?;
        let model = config.model_config()?;
        let dh = model.head_dim();
        let mut kinds = vec![model.decoder_attn.clone()];
        if model.mode != ModelMode::Decoder && model.encoder_attn != model.decoder_attn {
            kinds.insert(0, model.encoder_attn.clone());
        }
        if model.mode == ModelMode::Encoder {
            kinds = vec![model.encoder_attn.clone()];
        }
        let rows = kinds
            .into_iter()
            .map(|k| SynthesizerSpec::new(k, model.max_len, model.d_model, dh).map(|s| CostRow::new(&s, model.heads)))
            .collect::<Result<Vec<_>, _>>()?;
        print!("{}", cost_table_csv(&rows));
        return Ok(());
    }
    let variant = args
        .variant
        .ok_or_else(|| usage("params needs --variant or --config"))?;
    if args.heads == 0 || !args.d.is_multiple_of(args.heads) {
        return Err(usage(format!("--d {} is not divisible by --heads {}", args.d, args.heads)));
    }
    let mut defaults = VariantDefaults::for_max_len(args.n);
    if let Some(k) = args.k {
        defaults.k = k;
    }
    let kind = parse_variant(&variant, &defaults).map_err(|e| usage(e.to_string()))?;
    let spec = SynthesizerSpec::new(kind, args.n, args.d, args.d / args.heads)?;
    println!("{}", spec.param_count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn missing_config_is_a_usage_error() {
        let e = load_config(Path::new("/definitely/not/here.cfg")).unwrap_err();
        assert!(e.is::<Usage>());
    }
}
