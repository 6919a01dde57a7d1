mod args;
mod commands;
mod error;

use std::fs;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde_json::Value;

use args::{merge, Cli, Command};
use error::CliError;

fn load_config(cli: &Cli) -> Result<Option<Value>, CliError> {
    let Some(path) = &cli.config else {
        return Ok(None);
    };
    let text = fs::read_to_string(path).map_err(|e| lata::Error::io(path, e))?;
    let value: Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    Ok(Some(value))
}

fn limit_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("LATA_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("LATA_THREADS must be a positive integer, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))?;
    #[cfg(not(feature = "parallel"))]
    let _ = threads;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    limit_threads()?;
    let config = load_config(&cli)?;
    let config = config.as_ref();
    match &cli.command {
        Command::Ingest(a) => commands::ingest(&merge(a, config)?),
        Command::Agree(a) => commands::agree(&merge(a, config)?),
        Command::Calibrate(a) => commands::calibrate(&merge(a, config)?),
        Command::Eval(a) => commands::eval(&merge(a, config)?),
        Command::SweepK(a) => commands::sweep_k_cmd(&merge(a, config)?),
        Command::SweepPool(a) => commands::sweep_pool_cmd(&merge(a, config)?),
        Command::Theory(a) => commands::theory(&merge(a, config)?),
        Command::Report(a) => commands::report(&merge(a, config)?),
        Command::Synth(a) => commands::synth(&merge(a, config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
