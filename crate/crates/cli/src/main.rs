//! Experiment driver for the low-rank stochastic diffusion solver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dybo_cli::{config, driver, CliError};

#[derive(Parser)]
#[command(name = "dybo", version, about = "Multiscale low-rank solver for stochastic diffusion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a configured experiment and write its artifacts.
    Run {
        /// Configuration file (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Artifacts directory; created if missing.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge a run against a reference run and report the speed-up.
    Compare {
        /// Artifacts directory of the method run.
        #[arg(long)]
        run: PathBuf,
        /// Artifacts directory of the reference run.
        #[arg(long)]
        oracle: PathBuf,
        /// Merged CSV path; defaults to `<run>/compare.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the offline multiscale space once and store it for reuse.
    CacheOffline {
        #[arg(long)]
        config: PathBuf,
        /// Cache file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the media and initial fields of a configuration as matrices.
    ExportFields {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the field files.
        #[arg(long)]
        out: PathBuf,
    },
}

fn base_dir(config_path: &std::path::Path) -> PathBuf {
    config_path.parent().map(PathBuf::from).unwrap_or_else(|| PathBuf::from("."))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Run { config: path, out } => {
            let cfg = config::load(&path)?;
            let summary = driver::run(&cfg, &base_dir(&path), &out)?;
            print!("{}", std::fs::read_to_string(out.join("summary.txt")).unwrap_or_default());
            println!("artifacts: {}", summary.out_dir.display());
            Ok(())
        }
        Cmd::Compare { run, oracle, out } => {
            let summary = driver::compare(&run, &oracle, out.as_deref())?;
            print!("{}", summary.render());
            Ok(())
        }
        Cmd::CacheOffline { config: path, out } => {
            let cfg = config::load(&path)?;
            let cols = driver::cache_offline(&cfg, &base_dir(&path), &out)?;
            println!("cached {cols} offline columns to {}", out.display());
            Ok(())
        }
        Cmd::ExportFields { config: path, out } => {
            let cfg = config::load(&path)?;
            driver::export_fields(&cfg, &base_dir(&path), &out)?;
            println!("fields written to {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
