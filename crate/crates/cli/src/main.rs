//! Command-line front end for training, evaluation, sweeps, patch
//! visualization and dataset generation.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use elastic_vit::bench::{
    self, EvalCommand, ExperimentConfig, GenDataCommand, TrainCommand, VisualizeCommand,
};
use elastic_vit::data::DatasetSpec;
use elastic_vit::par::Exec;
use log::info;
use serde_json::{json, Value};

#[derive(Parser, Debug)]
#[command(name = "elastic", version, about = "Elastic input sampling for vision transformers")]
struct Cli {
    /// Worker threads for data-parallel loops (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every loop sequentially on one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output path; overrides the config file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write a checkpoint plus history CSV.
    Train(Common),
    /// Evaluate a checkpoint under a sampler and perturbation.
    Eval(Common),
    /// Run a registered experiment sweep and write CSV and JSON.
    Sweep(Common),
    /// Render a sampled patch set over an image.
    Visualize(Common),
    /// Render the synthetic shapes dataset into a cache file.
    GenData(Common),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let exec = configure(&cli)?;
    match &cli.command {
        Command::Train(c) => train(c, exec),
        Command::Eval(c) => eval(c, exec),
        Command::Sweep(c) => sweep(c, exec),
        Command::Visualize(c) => visualize(c),
        Command::GenData(c) => gen_data(c, exec),
    }
}

fn configure(cli: &Cli) -> Result<Exec> {
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if threads == Some(0) {
        bail!("--threads must be at least 1");
    }
    #[cfg(feature = "parallel")]
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(if cli.deterministic { Exec::Sequential } else { Exec::Parallel })
}

fn path_value(p: &Path) -> Value {
    json!(p.to_string_lossy())
}

fn load<T: serde::de::DeserializeOwned>(c: &Common, overrides: &[(&str, Value)]) -> Result<T> {
    let Some(path) = &c.config else {
        bail!("--config is required for this command");
    };
    Ok(bench::load_config(path, overrides)?)
}

fn train(c: &Common, exec: Exec) -> Result<()> {
    let mut ov = Vec::new();
    if let Some(s) = c.seed {
        ov.push(("train.seed", json!(s)));
    }
    if let Some(o) = &c.out {
        ov.push(("out", path_value(o)));
    }
    let cmd: TrainCommand = load(c, &ov)?;
    let outcome = bench::train_cmd(&cmd, exec, |s| {
        info!(
            "epoch {} loss {:.4} train_acc {:.4} val_acc {:.4}",
            s.epoch, s.loss, s.train_acc, s.val_acc
        )
    })?;
    info!(
        "wrote {} and {}",
        outcome.checkpoint.display(),
        outcome.history.display()
    );
    Ok(())
}

fn eval(c: &Common, exec: Exec) -> Result<()> {
    let mut ov = Vec::new();
    if let Some(s) = c.seed {
        ov.push(("seed", json!(s)));
    }
    let cmd: EvalCommand = load(c, &ov)?;
    let report = bench::eval_cmd(&cmd, exec)?;
    let text = serde_json::to_string_pretty(&json!({
        "accuracy": report.accuracy,
        "correct": report.correct,
        "total": report.total,
        "mean_tokens": report.mean_tokens,
        "config": cmd,
    }))?;
    match &c.out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn sweep(c: &Common, exec: Exec) -> Result<()> {
    let mut ov = Vec::new();
    if let Some(s) = c.seed {
        ov.push(("seeds", json!([s])));
    }
    if let Some(o) = &c.out {
        ov.push(("out", path_value(o)));
    }
    let cfg: ExperimentConfig = load(c, &ov)?;
    if cfg.out.is_none() {
        bail!("sweep needs an output directory (--out or key `out`)");
    }
    let result = bench::run_experiment(&cfg, exec)?;
    for s in &result.summary {
        info!(
            "{} {}={} accuracy {:.4} (std {:.4}, {} seeds)",
            result.experiment, s.param, s.value, s.mean, s.std, s.seeds
        );
    }
    Ok(())
}

fn visualize(c: &Common) -> Result<()> {
    let mut ov = Vec::new();
    if let Some(s) = c.seed {
        ov.push(("seed", json!(s)));
    }
    if let Some(o) = &c.out {
        ov.push(("out", path_value(o)));
    }
    let cmd: VisualizeCommand = load(c, &ov)?;
    let set = bench::visualize_cmd(&cmd)?;
    info!("rendered {} patches to {}", set.len(), cmd.out.display());
    Ok(())
}

fn gen_data(c: &Common, exec: Exec) -> Result<()> {
    let mut ov = Vec::new();
    if let Some(s) = c.seed {
        ov.push(("dataset.seed", json!(s)));
    }
    if let Some(o) = &c.out {
        ov.push(("out", path_value(o)));
    }
    let cmd: GenDataCommand = match &c.config {
        Some(_) => load(c, &ov)?,
        None => {
            let Some(out) = &c.out else {
                bail!("gen-data needs --config or --out");
            };
            GenDataCommand {
                dataset: DatasetSpec {
                    seed: c.seed.unwrap_or(0),
                    ..DatasetSpec::new(4, 12_000, 64, 0)
                },
                out: out.clone(),
            }
        }
    };
    let ds = bench::gen_data_cmd(&cmd, exec)?;
    info!("wrote {} samples to {}", ds.len(), cmd.out.display());
    Ok(())
}
