//! Config-driven experiment runner CLI.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedhm::config::ExperimentConfig;
use fedhm::metrics::EmitFormat;
use fedhm::runner::{self, RunOptions};

#[derive(Parser)]
#[command(name = "fedhm", about = "Federated learning with low-rank factorized models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Jsonl,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run {
        config: PathBuf,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_init: Option<u64>,
        #[arg(long)]
        seed_sample: Option<u64>,
        #[arg(long)]
        seed_data: Option<u64>,
        /// Metrics file format.
        #[arg(long, value_enum)]
        format: Option<Format>,
    },
    /// Print parameter, MAC, and communication accounting without training.
    Describe { config: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed_init,
            seed_sample,
            seed_data,
            format,
        } => ExperimentConfig::parse_file(&config).and_then(|cfg| {
            let opts = RunOptions {
                out_dir: out,
                seed_init,
                seed_sample,
                seed_data,
                format: format.map(|f| match f {
                    Format::Csv => EmitFormat::Csv,
                    Format::Jsonl => EmitFormat::JsonLines,
                }),
                threads: None,
            };
            runner::run(&cfg, &opts).map(|artifacts| {
                println!("metrics: {}", artifacts.metrics_path.display());
                println!("weights: {}", artifacts.weights_path.display());
                println!("config:  {}", artifacts.config_path.display());
            })
        }),
        Command::Describe { config } => {
            runner::describe_path(&config).map(|report| print!("{report}"))
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
