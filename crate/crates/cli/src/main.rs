mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CliError;
use config::Config;
use manifest::OutDir;

#[derive(Parser)]
#[command(
    name = "cbfswarm",
    version,
    about = "Run the collision-avoidance experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Batch of random multi-agent trials for each policy
    Montecarlo(Common),
    /// Gridlock sweep over the two-agent intersection
    Sweep1d {
        #[command(flatten)]
        common: Common,
        /// Barrier rate, overrides `corridor.lambda`
        #[arg(long)]
        lambda: Option<f64>,
        /// Filter constant, overrides `corridor.tau`
        #[arg(long)]
        tau: Option<f64>,
    },
    /// Equilibria and local stability of the intersection policies
    Analyze(Common),
    /// One scenario with per-step trace output
    Trial(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config; defaults apply to missing keys
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    /// Overrides `run.master_seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads, 0 for one per core
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Comma-separated policy labels, replaces the section's policy list
    #[arg(long, value_delimiter = ',')]
    policy: Option<Vec<String>>,
}

fn resolve(
    common: &Common,
    edit: impl FnOnce(&mut Config, Option<Vec<String>>),
) -> Result<Config, CliError> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.master_seed = seed;
    }
    edit(&mut cfg, common.policy.clone());
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (name, common, cfg) = match &cli.command {
        Command::Montecarlo(c) => (
            "montecarlo",
            c,
            resolve(c, |cfg, p| {
                cfg.montecarlo.policies = p.unwrap_or(cfg.montecarlo.policies.clone())
            })?,
        ),
        Command::Sweep1d {
            common,
            lambda,
            tau,
        } => (
            "sweep1d",
            common,
            resolve(common, |cfg, p| {
                if let Some(p) = p {
                    cfg.sweep1d.policies = p;
                }
                cfg.corridor.lambda = lambda.unwrap_or(cfg.corridor.lambda);
                cfg.corridor.tau = tau.unwrap_or(cfg.corridor.tau);
            })?,
        ),
        Command::Analyze(c) => (
            "analyze",
            c,
            resolve(c, |cfg, p| {
                cfg.analyze.policies = p.unwrap_or(cfg.analyze.policies.clone())
            })?,
        ),
        Command::Trial(c) => (
            "trial",
            c,
            resolve(c, |cfg, p| {
                cfg.trial.policies = p.unwrap_or(cfg.trial.policies.clone())
            })?,
        ),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build_global()
        .map_err(|e| CliError::Run(e.to_string()))?;
    let mut out = OutDir::create(&common.out)?;
    let text = match name {
        "montecarlo" => commands::montecarlo(&cfg, &mut out)?,
        "sweep1d" => commands::sweep1d(&cfg, &mut out)?,
        "analyze" => commands::analyze(&cfg, &mut out)?,
        _ => commands::trial(&cfg, &mut out)?,
    };
    print!("{text}");
    let manifest = out.finish(name, &cfg)?;
    println!(
        "wrote {} files to {} in {:.1} s",
        manifest.outputs.len(),
        common.out.display(),
        manifest.wall_clock_seconds
    );
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
