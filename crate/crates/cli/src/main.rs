use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

mod config;
mod error;
mod pipeline;

use config::Config;
use error::{CliError, Result};
use pipeline::Context;

/// Non-parametric Bayesian inference of drift and diffusion from trajectory data.
#[derive(Debug, Parser)]
#[command(name = "difinv", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate exit times or trajectory snapshots.
    Simulate(RunArgs),
    /// Turn simulations into moment or density observations.
    Prepare(RunArgs),
    /// Forward solve at the prior mean.
    Solve(RunArgs),
    /// MAP estimate and Laplace approximation.
    Infer(RunArgs),
    /// MALA chain preconditioned by the Laplace approximation.
    Sample(RunArgs),
    /// Prior and posterior predictive observables.
    Predict(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: Cli) -> Result<()> {
    let (stage, args): (fn(&Context) -> Result<()>, RunArgs) = match cli.command {
        Command::Simulate(a) => (pipeline::simulate, a),
        Command::Prepare(a) => (pipeline::prepare, a),
        Command::Solve(a) => (pipeline::solve, a),
        Command::Infer(a) => (pipeline::infer, a),
        Command::Sample(a) => (pipeline::sample, a),
        Command::Predict(a) => (pipeline::predict, a),
    };
    let mut cfg = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = pipeline::output_dir(&cfg, args.out.as_deref());
    std::fs::create_dir_all(&out).map_err(|source| CliError::Io { path: out.clone(), source })?;
    stage(&Context { cfg, out })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
