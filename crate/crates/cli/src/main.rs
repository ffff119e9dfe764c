//! `mcal` command-line front end.
//!
//! Exit status: 0 on success, 2 on invalid input or flags, 3 when a fit
//! fails numerically. Nothing is written unless the whole command succeeds.

mod args;
mod commands;
mod report;

use std::process::ExitCode;

use clap::Parser;

use args::{Cli, Command, FitArgs, Precision};
use commands::{CliError, Files};

const THREADS_ENV: &str = "MCAL_THREADS";

fn thread_count(flag: Option<usize>) -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::Validation(format!("{THREADS_ENV} must be a nonnegative integer, got `{v}`"))),
        Err(_) => Ok(flag.unwrap_or(0)),
    }
}

fn by_precision(a: &FitArgs, f32_run: fn(&FitArgs) -> Result<Files, CliError>, f64_run: fn(&FitArgs) -> Result<Files, CliError>) -> Result<Files, CliError> {
    commands::validate_data(&a.data)?;
    commands::validate_model(&a.model)?;
    match a.model.precision {
        Precision::F32 => f32_run(a),
        Precision::F64 => f64_run(a),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let threads = thread_count(cli.threads)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    let (files, output, input) = match &cli.command {
        Command::FitPs(a) => (by_precision(a, commands::fit_ps::<f32>, commands::fit_ps::<f64>)?, &a.output, Some(&a.data.input)),
        Command::FitOr(a) => (by_precision(a, commands::fit_or::<f32>, commands::fit_or::<f64>)?, &a.output, Some(&a.data.input)),
        Command::Estimate(a) => (
            by_precision(a, commands::estimate::<f32>, commands::estimate::<f64>)?,
            &a.output,
            Some(&a.data.input),
        ),
        Command::Diagnose(a) => (
            by_precision(a, commands::diagnose::<f32>, commands::diagnose::<f64>)?,
            &a.output,
            Some(&a.data.input),
        ),
        Command::CvPath(a) => {
            commands::validate_cv_path(a)?;
            (by_precision(a, commands::cv_path::<f32>, commands::cv_path::<f64>)?, &a.output, Some(&a.data.input))
        }
        Command::Simulate(a) => {
            let cfg = commands::sim_config(a)?;
            (commands::simulate(a, &cfg)?, &a.output, None)
        }
        Command::Subsample(a) => {
            commands::validate_data(&a.data)?;
            commands::validate_model(&a.model)?;
            let files = match a.model.precision {
                Precision::F32 => commands::subsample::<f32>(a)?,
                Precision::F64 => commands::subsample::<f64>(a)?,
            };
            (files, &a.output, Some(&a.data.input))
        }
    };
    commands::write_outputs(output, input.map(|p| p.as_path()), &files)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
