use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psrl_cli::{cmd_attack, cmd_certify, cmd_eval, cmd_report, cmd_train, Checkpoints, RunConfig};
use psrl_core::Norm;

#[derive(Parser)]
#[command(name = "psrl", about = "Train, certify and attack partially-supervised RL policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// DDQN, feature regression and the configured adversarial variant.
    Train(Common),
    /// Tree-based certification of every configured initial state.
    Certify(Common),
    /// Nominal reward, false action rate and feature errors.
    Eval(Common),
    /// PGD-attacked rollouts over the configured budgets.
    Attack(Common),
    /// Summary of the artifacts in the run directory.
    Report(Common),
}

#[derive(clap::Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint_g: Option<PathBuf>,
    #[arg(long)]
    checkpoint_q: Option<PathBuf>,
    #[arg(long)]
    norm: Option<String>,
    #[arg(long)]
    tv: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
}

impl Common {
    fn load(&self) -> anyhow::Result<(RunConfig, Checkpoints)> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        if let Some(norm) = &self.norm {
            cfg.set_norm(Norm::parse(norm)?);
        }
        if let Some(tv) = self.tv {
            cfg.horizon = tv;
        }
        if let Some(budget) = self.budget {
            cfg.budget = budget;
        }
        cfg.validate_ranges().map_err(anyhow::Error::msg)?;
        Ok((cfg, Checkpoints { g: self.checkpoint_g.clone(), q: self.checkpoint_q.clone() }))
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let (cfg, _) = c.load()?;
            cmd_train(&cfg)?;
            println!("wrote checkpoints to {}", cfg.out.display());
        }
        Command::Certify(c) => {
            let (cfg, ckpt) = c.load()?;
            let certs = cmd_certify(&cfg, &ckpt)?;
            print!("{}", psrl_cli::commands::aggregate_report(&certs));
        }
        Command::Eval(c) => {
            let (cfg, ckpt) = c.load()?;
            print!("{}", cmd_eval(&cfg, &ckpt)?);
        }
        Command::Attack(c) => {
            let (cfg, ckpt) = c.load()?;
            for r in cmd_attack(&cfg, &ckpt)? {
                println!("eps {}: {}/{} unsafe", r.eps, r.unsafe_count, r.rollouts);
            }
        }
        Command::Report(c) => {
            let (cfg, _) = c.load()?;
            print!("{}", cmd_report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
