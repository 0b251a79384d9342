mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use config::{parse_config, Kind, Params};
use run::RunError;

/// Runs one experiment of the slow-fast laboratory and writes `<kind>.csv`
/// plus a `<kind>.json` summary into the output directory.
#[derive(Debug, Parser)]
#[command(name = "slowfast", version = run::BUILD_ID)]
struct Cli {
    #[arg(value_enum)]
    kind: Kind,
    /// `key = value` configuration file; flags take precedence.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit without running.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    params: Params,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICS: u8 = 3;
const EXIT_VALIDATION: u8 = 4;

fn exit_code(e: &RunError) -> u8 {
    match e {
        RunError::Core(slowfast_core::Error::NonFinite(_) | slowfast_core::Error::Stiffness { .. }) => EXIT_NUMERICS,
        RunError::Core(slowfast_core::Error::Domain { .. }) => EXIT_CONFIG,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config = match parse_config(cli.kind, cli.config.as_deref(), &cli.params) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let resolved = serde_json::to_string_pretty(&config.summary_json()).expect("json");
    if cli.dry_run {
        println!("{resolved}");
        return ExitCode::SUCCESS;
    }
    eprintln!("{} with {}", config.kind, serde_json::to_string(&config.summary_json()).expect("json"));
    let artifacts = match run::run(&config) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    if let Some(csv) = &artifacts.csv {
        println!("wrote {}", csv.display());
    }
    println!("wrote {}", artifacts.summary.display());
    if artifacts.outcome.failed > 0 {
        eprintln!("{} criterion(s) failed", artifacts.outcome.failed);
        return ExitCode::from(EXIT_VALIDATION);
    }
    ExitCode::SUCCESS
}
