use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use uuseg_cli::config::RunConfig;
use uuseg_cli::{ablate, commands};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Cardiac-style segmentation experiments on synthetic data.
#[derive(Parser)]
#[command(name = "uuseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and test datasets.
    GenData(Common),
    /// Train a model and write per-epoch metrics and a checkpoint.
    Train(Common),
    /// Evaluate a checkpoint on the test data.
    Eval(Common),
    /// Compare CE, uncertainty-weighted and uncertainty-weighted + SAM training.
    Ablate(Common),
    /// Check every registered gradient against finite differences.
    Gradcheck(Common),
}

#[derive(Args)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Further `--key value` overrides, applied after the config file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<bool> {
    let mut out = std::io::stdout().lock();
    match cli.command {
        Command::GenData(c) => {
            let (train, test) = commands::gen_data(&c.resolve()?)?;
            println!("wrote {} and {}", train.display(), test.display());
        }
        Command::Train(c) => {
            commands::train(&c.resolve()?, &mut out)?;
        }
        Command::Eval(c) => {
            commands::eval(&c.resolve()?, &mut out)?;
        }
        Command::Ablate(c) => {
            ablate::ablate(&c.resolve()?, &mut out)?;
        }
        Command::Gradcheck(c) => return commands::gradcheck(c.resolve()?.seed, &mut out),
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
