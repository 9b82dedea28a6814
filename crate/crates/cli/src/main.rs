mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use config::{Mode, RunConfig};

/// Cross-image affinity segmentation experiments on synthetic data.
#[derive(Parser, Debug)]
#[command(name = "cian", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Text file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// baseline | ce | cp | rt | ablate
    #[arg(long, global = true)]
    mode: Option<Mode>,
    /// common | random | self
    #[arg(long, global = true)]
    pair: Option<String>,
    #[arg(long = "sub-ratio", global = true)]
    sub_ratio: Option<f64>,
    /// Any config key, as `key=value`; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the synthetic train and val splits.
    GenData,
    /// Train the image-level classifier and write seeds and saliency maps.
    Seeds,
    /// Train one configuration, or all four with `--mode ablate`.
    Train,
    /// Evaluate a checkpoint on the val split and write visualizations.
    Eval,
    /// Generate data, seeds and the four-row ablation in one run.
    Ablate,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let cwd = std::env::current_dir().context("reading the working directory")?;
    let mut base = cwd.clone();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)
            .with_context(|| format!("in config {}", path.display()))?;
        if let Some(parent) = path.parent() {
            base = cwd.join(parent);
        }
    }
    if let Ok(threads) = std::env::var("CIAN_THREADS") {
        cfg.set("threads", &threads).context("CIAN_THREADS")?;
    }
    // flags resolve against the working directory, config entries against the file
    if let Some(out) = &cli.out {
        cfg.out = cwd.join(out);
    }
    if let Some(seed) = cli.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = mode;
    }
    if let Some(pair) = &cli.pair {
        cfg.set("pair", pair)?;
    }
    if let Some(r) = cli.sub_ratio {
        cfg.set("sub_ratio", &r.to_string())?;
    }
    for item in &cli.set {
        cfg.apply_override(item)?;
    }
    cfg.resolve(&base);
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    match cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Seeds => commands::seeds(&cfg),
        Command::Train => commands::train(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Ablate => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
