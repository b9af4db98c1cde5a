mod config;
mod error;
mod fixtures;
mod pipeline;
mod pipelines;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Loaded;
use error::RunError;

#[derive(Parser)]
#[command(name = "anisoflow", version, about = "Batch runner for anisoflow experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        /// Skip SVG plots.
        #[arg(long)]
        no_plots: bool,
        /// Worker threads; overrides ANISOFLOW_WORKERS.
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Print the builtin kernels, bumps, fields, functions, measures and pipelines.
    ListFixtures,
    /// Schema-check a config without running it.
    Validate { config: PathBuf },
}

fn schema_failure(e: RunError) -> ExitCode {
    eprintln!("{e}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::ListFixtures => {
            for (section, name, summary) in fixtures::catalog() {
                println!("{section}\t{name}\t{summary}");
            }
            ExitCode::SUCCESS
        }
        Command::Validate { config } => match Loaded::from_path(&config).and_then(|l| pipeline::validate(&l)) {
            Ok(n) => {
                println!("ok: {n} sweep point(s)");
                ExitCode::SUCCESS
            }
            Err(e) => schema_failure(e),
        },
        Command::Run { config, no_plots, workers } => {
            let loaded = match Loaded::from_path(&config) {
                Ok(l) => l,
                Err(e) => return schema_failure(e),
            };
            let workers = workers.or_else(pipeline::worker_cap);
            match pipeline::execute(&loaded, !no_plots, workers) {
                Ok(summary) => {
                    for r in &summary.rows {
                        let status = if r.check.passed { "PASS" } else { "FAIL" };
                        println!("{} {status} {}: {}", r.point, r.check.name, r.check.detail);
                    }
                    if summary.passed() {
                        ExitCode::SUCCESS
                    } else {
                        for r in summary.failures() {
                            eprintln!("failed check `{}` at {}", r.check.name, r.point);
                        }
                        ExitCode::from(1)
                    }
                }
                Err(RunError::Runtime(m)) => {
                    eprintln!("{m}");
                    ExitCode::from(1)
                }
                Err(e) => schema_failure(e),
            }
        }
    }
}
