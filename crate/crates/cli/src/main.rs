use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lapg::harness::{self, mode_dir_name, ExperimentConfig};
use lapg::lapg::Mode;
use lapg::Error;

/// Distributed policy-gradient simulator: plain PG and lazily aggregated PG.
#[derive(Parser)]
#[command(name = "lapg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured mode and Monte-Carlo run and write metrics CSVs.
    Run {
        /// Configuration file, or `preset:NAME`.
        config: String,
        /// Output directory (overrides the configuration and LAPG_OUTPUT_ROOT).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare two mode directories (reference first) and print a JSON summary.
    Compare {
        reference: PathBuf,
        candidate: PathBuf,
        /// Reward threshold for the iterations/uploads-to-threshold columns.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Print the closed-form constants, hardness profile and parameter plan.
    Analyze {
        config: String,
        #[arg(long)]
        json: bool,
    },
    /// Cross-check the exact, enumerated, finite-difference and sampled gradients.
    OracleCheck {
        config: String,
        #[arg(long)]
        json: bool,
    },
    /// List the presets, or print one as TOML.
    Preset { name: Option<String> },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Domain(_) | Error::EnumerationTooLarge { .. } => 2,
        Error::Divergence { .. } | Error::Numeric(_) => 3,
        Error::Protocol(_) | Error::Decode(_) | Error::Transport(_) => 4,
    }
}

fn json<T: serde::Serialize>(v: &T) -> Result<String, Error> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Config(e.to_string()))
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::Run { config, output } => {
            let cfg = ExperimentConfig::load(&config)?;
            let dir = output.unwrap_or_else(|| harness::output_dir(&cfg));
            let outcome = harness::run_experiment(&cfg, &dir)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            for (mode, runs) in &outcome.runs {
                let finals: Vec<_> = runs.iter().filter_map(|r| r.last()).collect();
                let n = finals.len().max(1) as f64;
                println!(
                    "{}: {} runs, final avg reward {:.6}, cumulative uploads {:.1}",
                    mode_dir_name(*mode),
                    runs.len(),
                    finals.iter().map(|r| r.avg_reward).sum::<f64>() / n,
                    finals.iter().map(|r| r.cumulative_uploads as f64).sum::<f64>() / n,
                );
            }
            if let Some(f) = outcome.failures.first() {
                eprintln!("{} run {} failed: {}", mode_dir_name(f.mode), f.run_id, f.error);
                let Some(f) = outcome.failures.into_iter().next() else { unreachable!() };
                return Err(f.error);
            }
            let has = |m: Mode| cfg.algo.modes.contains(&m);
            if has(Mode::Pg) && has(Mode::Lapg) && cfg.algo.iterations > 0 {
                let c = harness::compare(&dir.join("pg"), &dir.join("lapg"), None)?;
                println!("{}", json(&c)?);
            }
            println!("metrics written to {}", outcome.dir.display());
        }
        Command::Compare {
            reference,
            candidate,
            threshold,
        } => println!("{}", json(&harness::compare(&reference, &candidate, threshold)?)?),
        Command::Analyze { config, json: as_json } => {
            let report = harness::analyze(&ExperimentConfig::load(&config)?)?;
            if as_json {
                println!("{}", json(&report)?);
            } else {
                print!("{report}");
            }
        }
        Command::OracleCheck { config, json: as_json } => {
            let report = harness::oracle_check(&ExperimentConfig::load(&config)?)?;
            if as_json {
                println!("{}", json(&report)?);
            } else {
                print!("{report}");
            }
            if !report.passed {
                return Err(Error::Numeric("oracle disagreement above tolerance".into()));
            }
        }
        Command::Preset { name: None } => {
            for p in harness::PRESETS {
                println!("{p}");
            }
        }
        Command::Preset { name: Some(name) } => print!("{}", harness::preset(&name)?.to_toml()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
