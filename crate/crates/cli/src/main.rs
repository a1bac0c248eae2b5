use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use defsent::Error;

mod commands;

/// Train and study sentence encoders that map definitions onto dictionary entries.
#[derive(Debug, Parser)]
#[command(name = "defsent", version)]
struct Cli {
    /// Worker threads for parallel seeds and evaluation (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Parse, normalise and merge dictionary files into one JSON Lines dataset.
    Ingest(commands::IngestArgs),
    /// Summary statistics of a dataset, optionally with the single-word filter.
    Stats(commands::StatsArgs),
    /// Generate the synthetic world (dictionary, STS splits, vocabulary).
    Synth(commands::SynthArgs),
    /// Build an entry-embedding matrix from an encoder checkpoint.
    BuildEmbeds(commands::BuildEmbedsArgs),
    /// Geometry report of an entry matrix, optionally writing its ICA transform.
    Geometry(commands::GeometryArgs),
    /// One training epoch of a base encoder against a frozen entry matrix.
    Train(commands::TrainArgs),
    /// Progressive separate training from a config file.
    Pst(commands::PstArgs),
    /// Spearman evaluation of an encoder on STS files.
    Eval(commands::EvalArgs),
    /// Two-dimensional projection of an entry matrix as CSV.
    ExportPlot(commands::ExportPlotArgs),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        _ if e.is_numeric_error() => 3,
        Error::ShapeMismatch { .. } => 3,
        _ if e.is_data_error() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Ingest(a) => commands::ingest(a),
        Command::Stats(a) => commands::stats(a),
        Command::Synth(a) => commands::synth(a),
        Command::BuildEmbeds(a) => commands::build_embeds(a),
        Command::Geometry(a) => commands::geometry(a),
        Command::Train(a) => commands::train(a),
        Command::Pst(a) => commands::pst(a),
        Command::Eval(a) => commands::eval(a),
        Command::ExportPlot(a) => commands::export_plot(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub(crate) fn output_root() -> PathBuf {
    std::env::var_os(commands::OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}
