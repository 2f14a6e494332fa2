use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctmpc_cli::error::{CliError, CliResult};
use ctmpc_cli::report::report;
use ctmpc_cli::run::load_config;
use ctmpc_cli::stages::{self, Ctx};

#[derive(Parser)]
#[command(name = "ctmpc", version, about = "Conformal tube MPC experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Run directory; each stage writes its own subdirectory.
    #[arg(long)]
    out: PathBuf,
    /// Replace the data and episode seeds.
    #[arg(long)]
    seed_override: Option<u64>,
    /// Override the configured episode count.
    #[arg(long)]
    episodes: Option<usize>,
    /// Train members and run episodes on all cores.
    #[arg(long)]
    parallel: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the ensemble members.
    Train(Common),
    /// Alternate magnitude pruning and fine-tuning.
    Prune {
        #[command(flatten)]
        common: Common,
        /// Override the configured iteration count.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Fit the conformal calibrator and check test coverage.
    Calibrate(Common),
    /// Run closed-loop episodes.
    Simulate(Common),
    /// Run episodes over the attack grid and an OOD batch.
    AttackSweep(Common),
    /// Summarize a run directory into report/report.json.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn ctx(c: Common) -> CliResult<Ctx> {
    if c.episodes == Some(0) {
        return Err(CliError::Input("--episodes must be >= 1".into()));
    }
    Ok(Ctx {
        cfg: load_config(&c.config, c.seed_override)?,
        run: c.out,
        parallel: c.parallel,
        episodes: c.episodes,
    })
}

fn dispatch(cmd: Command) -> CliResult<PathBuf> {
    match cmd {
        Command::Train(c) => stages::train(&ctx(c)?),
        Command::Prune { common, iterations } => stages::prune(&ctx(common)?, iterations),
        Command::Calibrate(c) => stages::calibrate(&ctx(c)?),
        Command::Simulate(c) => stages::simulate(&ctx(c)?),
        Command::AttackSweep(c) => stages::attack_sweep(&ctx(c)?),
        Command::Report { out } => report(&out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("wrote {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
