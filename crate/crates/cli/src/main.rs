use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tsmnet_cli::exit::{self, CliError};
use tsmnet_cli::{commands, RunConfig};

/// Experiments with SPD tangent space mapping networks.
#[derive(Parser)]
#[command(name = "tsmnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    Gen(RunArgs),
    /// Train a model on the source domains and write a checkpoint.
    Train(RunArgs),
    /// Adapt a checkpoint to the target domains and score it.
    Eval(RunArgs),
    /// Train and score every ablation arm over several seeds.
    Ablate(RunArgs),
    /// Run the running-mean convergence experiments.
    Converge(RunArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the configured seed.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Worker threads; computation is single-threaded, so only 1 changes nothing.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    threads: u32,
}

fn run(cli: Cli) -> Result<String, CliError> {
    let (args, f): (RunArgs, fn(&tsmnet_cli::ResolvedConfig, &std::path::Path) -> Result<String, CliError>) = match cli.command {
        Command::Gen(a) => (a, commands::gen),
        Command::Train(a) => (a, commands::train_cmd),
        Command::Eval(a) => (a, commands::eval),
        Command::Ablate(a) => (a, commands::ablate),
        Command::Converge(a) => (a, commands::converge),
        Command::Gradcheck(a) => (a, commands::gradcheck),
    };
    if args.threads > 1 {
        log::warn!("--threads {} requested; all computation runs on one thread", args.threads);
    }
    let cfg = RunConfig::load(&args.config, args.seed_override)?;
    log::info!("config hash {} seed {}", cfg.hash, cfg.config.seed);
    f(&cfg, &args.out)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TSMNET_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::from(exit::OK as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
