use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use sves_cli::align::{cmd_align, AlignOptions};
use sves_cli::bench::{render_table, run_scaling, run_suite, ScalingOptions};
use sves_cli::{plot, sft, worker, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "sves", version, about = "Evolution-strategy search over the singular values of LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Supervised warm start: train adapters, decompose, write artifacts.
    Sft {
        #[arg(long)]
        config: PathBuf,
        /// Fail (exit 3) when an adapter factor is degenerate.
        #[arg(long)]
        strict: bool,
    },
    /// Search over singular-value deltas of the supervised adapters.
    Align {
        #[arg(long)]
        config: PathBuf,
        /// Continue from the last checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Run one search per population, e.g. `--populations 8,32,128`.
        #[arg(long, value_delimiter = ',')]
        populations: Option<Vec<usize>>,
    },
    /// Serve evaluation jobs for a socket coordinator.
    Worker {
        #[arg(long)]
        config: PathBuf,
        /// Coordinator address; defaults to `transport.listen`.
        #[arg(long)]
        connect: Option<String>,
        /// Population of the coordinator's run, if it differs from `es.population`.
        #[arg(long)]
        population: Option<usize>,
    },
    /// Optimizer benchmarks on analytic functions.
    Bench {
        #[arg(long)]
        json: bool,
        /// Measure wall time against worker count instead.
        #[arg(long)]
        scaling: bool,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        delay_ms: u64,
    },
    /// Merge metrics.csv from several run directories into one CSV on stdout.
    PlotData {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
    },
}

fn load(path: &Path) -> Result<RunConfig, CliError> {
    let (config, warnings) = RunConfig::load(path)?;
    for w in warnings {
        log::warn!("{w}");
    }
    Ok(config)
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Sft { config, strict } => {
            let config = load(&config)?;
            let outcome = sft::cmd_sft(&config, strict || config.sft.strict)?;
            println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serialises"));
        }
        Command::Align {
            config,
            resume,
            populations,
        } => {
            let config = load(&config)?;
            let summaries = cmd_align(&config, &AlignOptions { resume, populations })?;
            println!("{}", serde_json::to_string_pretty(&summaries).expect("summary serialises"));
        }
        Command::Worker {
            config,
            connect,
            population,
        } => {
            let config = load(&config)?;
            worker::cmd_worker(&config, connect.as_deref(), population)?;
        }
        Command::Bench {
            json,
            scaling,
            workers,
            delay_ms,
        } => {
            if scaling {
                let options = ScalingOptions {
                    workers,
                    delay: Duration::from_millis(delay_ms),
                    ..ScalingOptions::default()
                };
                print!("{}", run_scaling(&options)?);
                return Ok(());
            }
            let report = run_suite()?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serialises"));
            } else {
                print!("{}", render_table(&report));
            }
            if !report.passed {
                return Err(CliError::Numerical("a benchmark missed its target".into()));
            }
        }
        Command::PlotData { runs } => print!("{}", plot::combined_metrics(&runs)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
