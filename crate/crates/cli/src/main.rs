use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use featlab_cli::commands::{cmd_gen, cmd_spectrum, cmd_train, cmd_useful, cmd_verify, Report};
use featlab_cli::{CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "featlab", version, about = "GD/SAM feature-learning toy experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (TOML)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Run only this seed instead of the configured list
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Output directory (overrides outputs.dir)
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate and save the train/test datasets
    Gen,
    /// Train with the configured optimizer and write traces and weights
    Train,
    /// Probe, cluster, upsample and retrain
    Useful,
    /// Top Hessian eigenvalues of a saved checkpoint
    Spectrum,
    /// Run the configured theory checks
    Verify,
}

fn run(cli: &Cli) -> Result<Report, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let cfg = ExperimentConfig::load(path)?.with_overrides(cli.seed, cli.out.clone());
    match cli.command {
        Command::Gen => cmd_gen(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Useful => cmd_useful(&cfg),
        Command::Spectrum => cmd_spectrum(&cfg),
        Command::Verify => cmd_verify(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            for note in &report.notes {
                eprintln!("{note}");
            }
            for f in &report.files {
                println!("{}", f.display());
            }
            if report.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                for f in &report.failures {
                    eprintln!("FAIL {f}");
                }
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
