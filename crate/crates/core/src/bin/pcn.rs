use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pcn::commands;
use pcn::manifest::RunManifest;
use pcn::PcnError;

/// Phase collaborative segmentation on two-phase phantoms.
#[derive(Parser, Debug)]
#[command(name = "pcn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a phantom dataset.
    PhantomGen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model bundle into a new run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Bundle checkpoint whose generator is borrowed in one-phase mode.
        #[arg(long)]
        donor: Option<PathBuf>,
    },
    /// Evaluate a trained run on a dataset.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the metrics report (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the ablation grid and its baselines.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        /// Two-phase dataset to split; by default each seed generates its own.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render PNG figures from a run's evaluation outputs.
    Plot {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print a summary of a run or ablation directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn summarize(m: &RunManifest) {
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}: {} output(s), config {}", m.command, m.outputs.len(), m.config_hash);
}

fn run(cli: Cli) -> Result<(), PcnError> {
    let m = match cli.command {
        Command::PhantomGen { config, out } => commands::phantom_gen(&config, &out)?,
        Command::Train {
            config,
            data,
            out,
            donor,
        } => commands::train(&config, &data, &out, donor.as_deref())?,
        Command::Eval { run, data, out } => commands::eval(&run, &data, &out)?,
        Command::Ablate { grid, data, out } => commands::ablate(&grid, data.as_deref(), &out)?,
        Command::Plot { run } => commands::plot(&run)?,
        Command::Report { run } => {
            print!("{}", commands::report(&run)?);
            return Ok(());
        }
    };
    summarize(&m);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
