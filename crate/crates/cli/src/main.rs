mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, Overrides, EXIT_CHECK, EXIT_CONFIG};
use config::RunConfig;

#[derive(Parser)]
#[command(name = "infogamma", version, about = "Rate scans, Fokker-Planck runs and identity checks for non-reversible diffusions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed for random batteries and particle runs.
    #[arg(long)]
    seed: Option<u64>,
    /// Use this rate instead of scanning for it.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Smallest-eigenvalue field and global rate.
    Scan(Common),
    /// Fokker-Planck evolution with decay checks.
    Evolve(Common),
    /// Pointwise and integrated identity batteries.
    Verify(Common),
    /// Euler-Maruyama ensemble against the moments of pi.
    Sample(Common),
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let (common, f): (&Common, fn(&RunConfig, &Overrides) -> Result<bool, CliError>) = match &cli.command {
        Command::Scan(c) => (c, commands::scan),
        Command::Evolve(c) => (c, commands::evolve),
        Command::Verify(c) => (c, commands::verify),
        Command::Sample(c) => (c, commands::sample),
    };
    let cfg = RunConfig::load(&common.config).map_err(|message| CliError {
        code: EXIT_CONFIG,
        message,
    })?;
    let overrides = Overrides {
        out: common.out.clone(),
        seed: common.seed,
        lambda: common.lambda,
    };
    f(&cfg, &overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(EXIT_CHECK as u8)
        }
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code as u8)
        }
    }
}
