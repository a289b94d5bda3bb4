use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info, warn};

use fgddf::fusion::FusionRule;
use fgddf::harness::{self, load_scenario};
use fgddf::Error;

#[derive(Parser)]
#[command(name = "fgddf", version, about = "Heterogeneous decentralized data fusion simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte Carlo campaign and write result files.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = parse_rule)]
        fusion: Option<FusionRule>,
        /// Message delivery probability.
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        mc: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "results")]
        out: PathBuf,
        /// Also run the centralized baseline.
        #[arg(long)]
        centralized: bool,
        /// Write each robot's final factor graph (first run) as DOT.
        #[arg(long)]
        dot: bool,
    },
    /// Load and validate a scenario file.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Tabulate metric differences between two result directories.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
}

fn parse_rule(s: &str) -> Result<FusionRule, String> {
    FusionRule::parse(s).ok_or_else(|| format!("expected hs-cf or hs-ci, got {s:?}"))
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config { .. } => ExitCode::from(1),
        _ => ExitCode::from(2),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Validate { scenario } => match load_scenario(&scenario) {
            Ok(s) => {
                println!(
                    "{}: {} robots, {} targets, {} edges, global dimension {}",
                    s.config.name,
                    s.robots.len(),
                    s.targets.len(),
                    s.topology.edges().len(),
                    s.global_dim()
                );
                ExitCode::SUCCESS
            }
            Err(e) => {
                error!("{e}");
                exit_for(&e)
            }
        },
        Command::Compare { a, b } => match harness::compare(&a, &b) {
            Ok(table) => {
                print!("{table}");
                ExitCode::SUCCESS
            }
            Err(e) => {
                error!("{e}");
                ExitCode::from(2)
            }
        },
        Command::Run {
            scenario,
            fusion,
            dropout,
            mc,
            seed,
            out,
            centralized,
            dot,
        } => {
            let scn = match load_scenario(&scenario).and_then(|s| s.with_overrides(fusion, dropout, mc, seed)) {
                Ok(s) => s,
                Err(e) => {
                    error!("{e}");
                    return exit_for(&e);
                }
            };
            let start = std::time::Instant::now();
            let result = harness::run_monte_carlo(&scn, centralized);
            info!(
                "{}: {} of {} runs completed in {:.1} s",
                scn.config.name,
                result.runs.len(),
                scn.config.mc_runs,
                start.elapsed().as_secs_f64()
            );
            if result.runs.is_empty() {
                error!("every run failed");
                return ExitCode::from(2);
            }
            let written = harness::write_results(&out, &scn, &result)
                .and_then(|_| if dot { harness::write_dot(&out, &result) } else { Ok(()) });
            if let Err(e) = written {
                error!("{e}");
                return ExitCode::from(2);
            }
            if !result.failures.is_empty() {
                warn!("{} runs failed and were excluded", result.failures.len());
                return ExitCode::from(2);
            }
            ExitCode::SUCCESS
        }
    }
}
