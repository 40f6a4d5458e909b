use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod exit;
mod run_dir;

use config::RunConfig;
use exit::CliError;

/// Learn small synthetic training sets and evaluate them.
#[derive(Parser)]
#[command(name = "condensery", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config value; bare keys resolve to their section (e.g. `ipc=10`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory (default: `<output_dir>/<command>`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Condense the configured dataset into a synthetic set.
    Condense(ConfigArgs),
    /// Train fresh networks on a synthetic set and test them on real data.
    Eval {
        #[command(flatten)]
        args: ConfigArgs,
        /// Synthetic set container (.cnd).
        #[arg(long)]
        synthetic: PathBuf,
        /// Evaluation scale: desk or paper.
        #[arg(long)]
        protocol: Option<String>,
        /// Method name used in reports.
        #[arg(long, default_value = "synthetic")]
        label: String,
    },
    /// Select a real subset with a coreset baseline.
    Coreset {
        #[command(flatten)]
        args: ConfigArgs,
        /// random, herding, kcenter or forgetting (default: coreset.method).
        #[arg(long)]
        method: Option<String>,
    },
    /// Write a 2-D PCA projection of real and synthetic features.
    ExportProj {
        #[command(flatten)]
        args: ConfigArgs,
        #[arg(long)]
        synthetic: PathBuf,
    },
    /// Finite-difference check of every differentiable primitive.
    Gradcheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("CONDENSERY_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(format!("CONDENSERY_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(CliError::runtime)
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let done = |p: PathBuf| println!("wrote {}", p.display());
    match cli.command {
        Command::Condense(args) => done(commands::condense(&args.load()?, args.out)?),
        Command::Eval {
            args,
            synthetic,
            protocol,
            label,
        } => done(commands::eval(&args.load()?, &synthetic, protocol.as_deref(), &label, args.out)?),
        Command::Coreset { args, method } => done(commands::coreset(&args.load()?, method.as_deref(), args.out)?),
        Command::ExportProj { args, synthetic } => done(commands::export_projection(&args.load()?, &synthetic, args.out)?),
        Command::Gradcheck { seed, inject_fault } => commands::gradcheck(seed, inject_fault.as_deref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { exit::OK });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(exit::OK),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
