use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use accel_resilience::cli::{self, CharacterizeMode, SweepAxis};
use accel_resilience::Result;

#[derive(Parser)]
#[command(version, about = "Accelerator resilience simulator for iterative denoising workloads")]
struct Args {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Fault-sampling seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and write the report and event traces.
    Run,
    /// Single-flip sensitivity experiments on the toy workload.
    Characterize {
        #[arg(long, value_enum)]
        mode: CharacterizeMode,
    },
    /// One seeded batch of runs per value of a parameter.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        values: Vec<f64>,
    },
    /// Pretty-print a report CSV (default: `<out>/report.csv`).
    Report { path: Option<PathBuf> },
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: Args) -> Result<()> {
    let mut cfg = cli::load_config(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    match args.command {
        Command::Run => {
            let report = cli::cmd_run(&cfg)?;
            cli::print(&format!("{report}\nwrote {}\n", cfg.out_dir.display()));
        }
        Command::Characterize { mode } => {
            let path = cli::cmd_characterize(&cfg, mode)?;
            cli::print(&format!("wrote {}\n", path.display()));
        }
        Command::Sweep { axis, values } => {
            let (path, _) = cli::cmd_sweep(&cfg, axis, &values)?;
            cli::print(&format!("wrote {}\n", path.display()));
        }
        Command::Report { path } => {
            let path = path.unwrap_or_else(|| cfg.out_dir.join(cli::REPORT_FILE));
            cli::print(&cli::cmd_report(&path)?);
        }
    }
    Ok(())
}
