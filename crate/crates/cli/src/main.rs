use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use d2c_cli::commands::{default_path, NOMINAL_FILE, POLICY_FILE, ROM_FILE};
use d2c_cli::{cmd_design, cmd_evaluate, cmd_optimize, cmd_pipeline, cmd_sysid, load, Status};

#[derive(Parser)]
#[command(name = "d2c", version, about = "Decoupled data-based control pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Validate the configuration and exit.
    #[arg(long)]
    dry_run: bool,
    /// Worker threads, 0 for one per core. Defaults to $THREADS or 0.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Open-loop trajectory optimization.
    Optimize(Common),
    /// Identify a reduced-order LTV model around the nominal.
    Sysid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nominal: Option<PathBuf>,
    },
    /// Design LQR and Kalman gains on the identified model.
    Design {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        nominal: Option<PathBuf>,
        #[arg(long)]
        rom: Option<PathBuf>,
    },
    /// Monte Carlo evaluation of a policy.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// All stages in order.
    Pipeline(Common),
}

fn run(cli: Cli) -> d2c::Result<Status> {
    let common = match &cli.command {
        Command::Optimize(c) | Command::Pipeline(c) => c,
        Command::Sysid { common, .. } | Command::Design { common, .. } | Command::Evaluate { common, .. } => common,
    };
    let settings = load(&common.config, common.seed, common.out.as_deref())?;
    if common.dry_run {
        log::info!("configuration {} is valid", common.config.display());
        return Ok(Status::Ok);
    }
    let threads = common
        .threads
        .or_else(|| std::env::var("THREADS").ok().and_then(|t| t.parse().ok()))
        .unwrap_or(0);
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("could not configure thread pool: {e}");
    }
    let path = |p: &Option<PathBuf>, file| p.clone().unwrap_or_else(|| default_path(&settings, file));
    match &cli.command {
        Command::Optimize(_) => cmd_optimize(&settings),
        Command::Sysid { nominal, .. } => cmd_sysid(&settings, &path(nominal, NOMINAL_FILE)),
        Command::Design { nominal, rom, .. } => {
            cmd_design(&settings, &path(nominal, NOMINAL_FILE), &path(rom, ROM_FILE))
        }
        Command::Evaluate { policy, .. } => cmd_evaluate(&settings, &path(policy, POLICY_FILE)),
        Command::Pipeline(_) => cmd_pipeline(&settings),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Warning) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
