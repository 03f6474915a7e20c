//! `neon`: train cluster models, neuralize them and explain assignments.

mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "neon", version, about = "Neuralized k-means: training, explanation and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Opts {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    run: RunConfig,
}

#[derive(Subcommand)]
enum Command {
    /// Write labeled Gaussian blobs as CSV.
    Blobs(Opts),
    /// Train a standard, kernel or deep cluster model.
    Train(Opts),
    /// Rewrite a trained model as a network for one cluster.
    Neuralize(Opts),
    /// Propagate each point's assignment logit to its features.
    Explain(Opts),
    /// Sensitivity, gradient×input, simple Taylor and integrated gradients.
    Baseline(Opts),
    /// Pixel-flipping curves for the requested methods.
    Flip(Opts),
    /// Purity of the model's hard assignments against the labels.
    Purity(Opts),
}

fn settings(opts: Opts) -> Result<RunConfig> {
    let base = match &opts.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.merged(opts.run);
    cfg.validate()?;
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NEON_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| anyhow::anyhow!("NEON_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Blobs(o) => commands::blobs(&settings(o)?),
        Command::Train(o) => commands::train(&settings(o)?),
        Command::Neuralize(o) => commands::neuralize_cmd(&settings(o)?),
        Command::Explain(o) => commands::explain(&settings(o)?),
        Command::Baseline(o) => commands::baseline(&settings(o)?),
        Command::Flip(o) => commands::flip(&settings(o)?),
        Command::Purity(o) => {
            let p = commands::purity_cmd(&settings(o)?)?;
            println!("{p}");
            Ok(())
        }
    }
}

/// Error category for the machine-readable error line.
fn kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<neon_core::Error>() {
            return match e {
                neon_core::Error::Domain(_) => "domain",
                neon_core::Error::Shape(_) => "shape",
                neon_core::Error::Config(_) => "config",
                neon_core::Error::Resource(_) => "resource",
                neon_core::Error::Infeasible { .. } => "infeasible",
                neon_core::Error::Unreachable { .. } => "unreachable",
                neon_core::Error::Json(_) => "json",
            };
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
        if cause.is::<serde_json::Error>() {
            return "json";
        }
    }
    "input"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({"error": kind(&e), "message": format!("{e:#}")});
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
