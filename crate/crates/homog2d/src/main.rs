use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use homog2d::runner::{run, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "homog2d", about = "2D periodic homogenization studies", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and emit its artifacts.
    Run {
        /// Path of the TOML experiment config.
        config: PathBuf,
        /// Exit nonzero when any pass flag fails.
        #[arg(long)]
        strict: bool,
        /// Worker threads for parallel sweeps.
        #[arg(long)]
        jobs: Option<usize>,
        /// Output directory (overrides HOMOG2D_OUT and the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run a single stage: cell, tails, spectrum or expansion.
        #[arg(long, value_parser = parse_stage)]
        only: Option<Stage>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            strict,
            jobs,
            out,
            only,
        } => {
            let opts = RunOptions {
                strict,
                jobs,
                out,
                only,
            };
            match run(&config, &opts) {
                Ok(summary) => {
                    print!("{}", summary.log);
                    if strict && !summary.pass {
                        eprintln!("strict mode: pass flags failed");
                        ExitCode::FAILURE
                    } else {
                        ExitCode::SUCCESS
                    }
                }
                Err(err) => {
                    eprintln!("error: {err}");
                    ExitCode::FAILURE
                }
            }
        }
    }
}
