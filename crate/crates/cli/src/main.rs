//! `deadbeat-mpc`: design, simulate and verify deadbeat MPC scenarios.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime infeasibility,
//! 3 property failure.

mod commands;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;
use scenario::Scenario;

const LOG_ENV: &str = "DEADBEAT_MPC_LOG";

#[derive(Debug, Parser)]
#[command(
    name = "deadbeat-mpc",
    version,
    about = "Deadbeat model predictive control for SISO linear systems",
    after_help = "Diagnostics: set DEADBEAT_MPC_LOG to quiet, info or debug (default: warnings only)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Print the deadbeat gain, terminal weight and terminal-set certificate
    Design {
        /// Scenario file (TOML)
        scenario: PathBuf,
    },
    /// Run the closed loop and write CSV, SVG and the design report
    Simulate {
        scenario: PathBuf,
        /// Output directory (overrides [output].dir)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suite and print a JSON report
    Verify {
        scenario: PathBuf,
        /// Seed for the random initial states (overrides [simulation].seed)
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn init_logging() {
    let level = match std::env::var(LOG_ENV).as_deref() {
        Ok("quiet") => log::LevelFilter::Off,
        Ok("info") => log::LevelFilter::Info,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            eprintln!("warning: {LOG_ENV}={other:?} is not one of quiet|info|debug; using warnings only");
            log::LevelFilter::Warn
        }
        Err(_) => log::LevelFilter::Warn,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
}

fn load(path: &Path) -> Result<Scenario, CliError> {
    Scenario::load(path).map_err(|e| CliError::Validation(e.to_string()))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Design { scenario } => {
            let sc = load(&scenario)?;
            let d = commands::design(&sc)?;
            print!("{}", commands::design_report(&sc, &d));
        }
        Command::Simulate { scenario, out } => {
            let sc = load(&scenario)?;
            let dir = out.unwrap_or_else(|| sc.out_dir.clone());
            let outcome = commands::simulate(&sc, &dir)?;
            let t = &outcome.trajectory;
            log::info!("max |u| = {:.6}", t.max_abs_control());
            println!("steps: {}", t.steps.len());
            match t.settled_at {
                Some(k) => println!("settled at k = {k}"),
                None => println!("not settled within {} steps", t.steps.len()),
            }
            println!("constraint violations: {}", t.constraint_violations);
            println!("csv: {}", outcome.csv.display());
            println!("svg: {}", outcome.svg.display());
            println!("report: {}", outcome.report.display());
        }
        Command::Verify { scenario, seed } => {
            let sc = load(&scenario)?;
            let seed = seed.unwrap_or(sc.seed);
            let report = commands::verify(&sc, seed)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable"));
            if !report.passed {
                let failed: Vec<&str> = report.properties.iter().filter(|p| !p.passed).map(|p| p.name).collect();
                return Err(CliError::PropertyFailure(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // usage errors are validation errors; --help / --version succeed
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    init_logging();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
