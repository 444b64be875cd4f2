mod commands;
mod config;
mod error;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::{CvArgs, EvaluateArgs, GenerateArgs, IngestArgs, RunArgs, ScoreArgs};
use error::{CliError, CliResult, Kind};

/// Anomalous edge detection in dynamic graphs.
#[derive(Debug, Parser)]
#[command(name = "strgnn", version, about)]
struct Cli {
    /// More log output (-v debug, -vv trace). RUST_LOG overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only log warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse an edge file and print a summary.
    Ingest(IngestArgs),
    /// Write a synthetic planted-community dynamic graph.
    Generate(GenerateArgs),
    /// Write labeled test candidates with injected anomalies.
    Inject(RunArgs),
    /// Train a model and save a checkpoint.
    Train(RunArgs),
    /// Score the test period of a dataset with a checkpoint.
    Evaluate(EvaluateArgs),
    /// Score explicit candidate edges with a checkpoint.
    Score(ScoreArgs),
    /// Train and evaluate over a grid of settings.
    Sweep(RunArgs),
    /// Rolling-origin cross-validation inside the training period.
    Cv(CvArgs),
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "warn",
        (false, 0) => "info",
        (false, 1) => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
}

fn run(cli: Cli) -> CliResult<()> {
    match &cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Generate(a) => commands::generate(a),
        Command::Inject(a) => commands::inject(a),
        Command::Train(a) => commands::train(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Score(a) => commands::score(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Cv(a) => commands::cv(a),
    }
}

/// Clap's rendered error up to its usage block, folded onto one line.
fn usage_message(e: &clap::Error) -> String {
    let text = e.to_string();
    let parts: Vec<&str> = text
        .lines()
        .take_while(|l| !l.starts_with("Usage:"))
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with("tip:"))
        .collect();
    let joined = parts.join(" ");
    let msg = joined.trim_start_matches("error: ");
    if msg.is_empty() { "invalid arguments".to_string() } else { msg.to_string() }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) if e.kind() == ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
            let _ = e.print();
            return ExitCode::from(Kind::Usage.exit_code() as u8);
        }
        Err(e) => {
            let err = CliError::new(Kind::Usage, usage_message(&e));
            eprintln!("{}", err.to_line());
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    init_logging(&cli);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_line());
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
