use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use must_core::cli::{cmd_ablate, cmd_analyze, cmd_gen_data, cmd_sweep, cmd_train, Analysis, RunConfig};

/// Multi-source student/teacher domain adaptation experiments.
#[derive(Parser)]
#[command(name = "must-lab", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run config file (`key = value` lines).
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Output root; defaults to $MUST_LAB_OUT, then ./must-lab-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config key; repeatable, wins over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domains and their manifest.
    GenData,
    /// Train the configured variant.
    Train,
    /// Score a lambda x confidence-threshold grid and pick a winner.
    Sweep,
    /// Run a diagnostic on trained outputs.
    Analyze {
        /// bound, consistency or margin
        which: Analysis,
    },
    /// Compare source-only, only-bn and MUST on the same seeds.
    Ablate,
    /// Print the effective config.
    ShowConfig,
}

fn run(cli: Cli) -> must_core::Result<()> {
    let mut overrides = cli.common.overrides;
    if let Some(out) = cli.common.out {
        overrides.push(format!("out_dir={}", out.display()));
    }
    let cfg = RunConfig::resolve(cli.common.config.as_deref(), &overrides)?;
    let written = match cli.command {
        Command::GenData => cmd_gen_data(&cfg)?,
        Command::Train => cmd_train(&cfg)?,
        Command::Sweep => cmd_sweep(&cfg)?,
        Command::Analyze { which } => cmd_analyze(&cfg, which)?,
        Command::Ablate => cmd_ablate(&cfg)?,
        Command::ShowConfig => {
            print!("{}", cfg.to_text());
            return Ok(());
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("must-lab: {e}");
            ExitCode::FAILURE
        }
    }
}
