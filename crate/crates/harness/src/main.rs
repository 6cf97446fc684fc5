use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use worldsync_core::schema::parse_schema;
use worldsync_harness::advisor::recommend;
use worldsync_harness::equivalence::{self, EquivConfig};
use worldsync_harness::{run_scenario, HarnessError, Scenario};

#[derive(Parser)]
#[command(name = "worldsync", version, about = "Shared-world simulation and deployment tooling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schema files.
    Schema {
        #[command(subcommand)]
        command: SchemaCommand,
    },
    /// Scenario simulation.
    Sim {
        #[command(subcommand)]
        command: SimCommand,
    },
    /// Recommend a deployment for a latency budget and scene size.
    Advise {
        #[arg(long)]
        latency_ms: f64,
        #[arg(long)]
        users: u64,
    },
    /// Compare stateless instances against one stateful server on a scenario's call log.
    Equiv {
        scenario: PathBuf,
        #[arg(long, default_value_t = 3)]
        instances: usize,
        #[arg(long, default_value_t = 100)]
        seeds: u64,
        /// Blind writes instead of compare-and-swap.
        #[arg(long)]
        no_cas: bool,
    },
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Parse and validate; prints violations, exits 1 if any.
    Check { file: PathBuf },
}

#[derive(Subcommand)]
enum SimCommand {
    Run {
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Schema {
            command: SchemaCommand::Check { file },
        } => {
            let text = std::fs::read_to_string(&file)?;
            let schema = match parse_schema(&text) {
                Ok(s) => s,
                Err(e) => {
                    println!("{}: {e}", file.display());
                    return Ok(ExitCode::FAILURE);
                }
            };
            let violations = schema.validate();
            for v in &violations {
                println!("{}: {v}", file.display());
            }
            if violations.is_empty() {
                println!("{}: ok", file.display());
                Ok(ExitCode::SUCCESS)
            } else {
                Ok(ExitCode::FAILURE)
            }
        }
        Command::Sim {
            command: SimCommand::Run { scenario, seed, out },
        } => {
            let mut s = Scenario::load(&scenario)?;
            if let Some(seed) = seed {
                s = s.with_seed(seed);
            }
            let json = run_scenario(&s)?.to_json();
            match out {
                Some(path) => std::fs::write(path, json)?,
                None => print!("{json}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Advise { latency_ms, users } => {
            let r = recommend(latency_ms, users).map_err(|e| HarnessError::InvalidScenario(e.to_string()))?;
            println!("{}", r.verdict);
            println!("{}", r.rationale);
            Ok(ExitCode::SUCCESS)
        }
        Command::Equiv {
            scenario,
            instances,
            seeds,
            no_cas,
        } => {
            let s = Scenario::load(&scenario)?;
            let cfg = EquivConfig {
                instances,
                seeds,
                cas: !no_cas,
            };
            let summary = equivalence::check_scenario(&s, &cfg)?;
            println!(
                "instances={} seeds={} cas={} equal={} diverged={}",
                instances, seeds, cfg.cas, summary.equal, summary.diverged
            );
            if let Some(d) = &summary.first_divergence {
                println!("first divergence: seed {} {}", d.seed, d.detail);
            }
            Ok(if summary.diverged == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}
