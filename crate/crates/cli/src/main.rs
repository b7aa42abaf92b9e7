//! Command-line front end for cocycle-lab experiments.
//!
//! Exit statuses: 0 success, 2 precondition failure, 3 numerical guard
//! trip, 64 unknown command, 65 malformed configuration.

// `!(x > 0.0)` guards are written to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod options;
mod run;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use options::{resolve, Diagnostic, Options, Severity};
use run::{exit, Failure};

/// Environment variable capping the worker pool.
const THREADS_ENV: &str = "COCYCLE_LAB_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "cocycle-lab",
    version,
    about = "Numerical experiments on quasi-periodic cocycles"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Finite-scale Lyapunov spectra over an n-schedule (CSV).
    Le(Options),
    /// Deviation curve (CSV) and its fit (JSON).
    Ldt(Options),
    /// Multiscale avalanche-principle refinement (JSON).
    Ap(Options),
    /// Diophantine scan of the frequency (JSON).
    Dioph(Options),
    /// Sublevel-set fit of |det A| (JSON).
    Loja(Options),
    /// Unimodular change of coordinates (JSON, optional cocycle file).
    Coord(Options),
    /// Fourier profile, BMO norm and John-Nirenberg check of u_n (JSON).
    Harm(Options),
    /// All analyses bundled into one JSON document.
    Report(Options),
    /// Lists every violated precondition of a command without running it.
    Validate {
        /// Command to validate.
        #[arg(value_name = "COMMAND")]
        command_name: String,
        #[command(flatten)]
        options: Options,
    },
}

impl Command {
    fn parts(self) -> (&'static str, Options) {
        match self {
            Command::Le(o) => ("le", o),
            Command::Ldt(o) => ("ldt", o),
            Command::Ap(o) => ("ap", o),
            Command::Dioph(o) => ("dioph", o),
            Command::Loja(o) => ("loja", o),
            Command::Coord(o) => ("coord", o),
            Command::Harm(o) => ("harm", o),
            Command::Report(o) => ("report", o),
            Command::Validate { .. } => unreachable!("validate is dispatched separately"),
        }
    }
}

#[derive(Serialize)]
struct Validation<'a> {
    command: &'a str,
    valid: bool,
    diagnostics: &'a [Diagnostic],
}

fn diagnostics_code(diags: &[Diagnostic]) -> u8 {
    if diags.iter().any(|d| d.kind == Severity::Malformed) {
        exit::MALFORMED
    } else {
        exit::PRECONDITION
    }
}

fn configure_threads(flag: Option<usize>) -> Result<(), Failure> {
    let threads = match flag {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(
                v.trim()
                    .parse::<usize>()
                    .ok()
                    .filter(|t| *t > 0)
                    .ok_or_else(|| {
                        Failure::malformed(format!(
                            "{THREADS_ENV} must be a positive integer, got {v:?}"
                        ))
                    })?,
            ),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Failure::malformed(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn validate(target: &str, options: Options) -> Result<(), Failure> {
    let diags = match options.with_config() {
        Ok(opts) => resolve(target, &opts).err().unwrap_or_default(),
        Err(d) => vec![d],
    };
    let report = Validation {
        command: target,
        valid: diags.is_empty(),
        diagnostics: &diags,
    };
    let mut text = serde_json::to_string_pretty(&report).expect("serializable diagnostics");
    text.push('\n');
    run::emit(None, &text)
}

fn execute(command: Command) -> Result<(), Failure> {
    if let Command::Validate {
        command_name,
        options,
    } = command
    {
        return validate(&command_name, options);
    }
    let (name, options) = command.parts();
    let options = options
        .with_config()
        .map_err(|d| Failure::malformed(d.message))?;
    let exp = resolve(name, &options).map_err(|diags| {
        let message = diags
            .iter()
            .map(|d| d.message.as_str())
            .collect::<Vec<_>>()
            .join("\n");
        Failure {
            code: diagnostics_code(&diags),
            message,
        }
    })?;
    configure_threads(options.threads)?;
    match name {
        "le" => run::le(&exp),
        "ldt" => run::ldt(&exp),
        "ap" => run::ap(&exp),
        "dioph" => run::dioph(&exp),
        "loja" => run::loja(&exp),
        "coord" => run::coord(&exp),
        "harm" => run::harm(&exp),
        "report" => run::report(&exp),
        _ => unreachable!("resolve rejects unknown commands"),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::SUCCESS,
                ErrorKind::InvalidSubcommand
                | ErrorKind::MissingSubcommand
                | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => exit::UNKNOWN_COMMAND,
                _ => exit::MALFORMED,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
