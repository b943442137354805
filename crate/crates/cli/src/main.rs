//! `decc`: extraction runs, evaluation, corpus reports, demonstrations and
//! the annotation service.
//!
//! Exit codes: 0 success, 2 configuration error, 1 runtime failure.

mod backend;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigError;

#[derive(Parser)]
#[command(name = "decc", version, about = "Emotion-cause pair extraction with a staged LLM chain")]
struct Cli {
    /// TOML experiment config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the chain (or a baseline) over a corpus.
    Run(commands::run::RunArgs),
    /// Score predictions against a corpus.
    Eval(commands::eval::EvalArgs),
    /// Document and pair counts of a corpus.
    Stats(commands::data::StatsArgs),
    /// Histogram of cause position relative to the emotion clause.
    Bias(commands::data::BiasArgs),
    /// Build, curate and list in-context demonstrations.
    #[command(subcommand)]
    Demos(commands::demos::DemosCommand),
    /// Evaluate the chain at several demonstration counts.
    Sweep(commands::run::SweepArgs),
    /// Serve the human-judgment annotation API.
    Serve(commands::serve::ServeArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = config::FileConfig::load(cli.config.as_deref()).and_then(|file| match cli.command {
        Command::Run(a) => commands::run::run(a, &file),
        Command::Eval(a) => commands::eval::eval(a, &file),
        Command::Stats(a) => commands::data::stats(a, &file),
        Command::Bias(a) => commands::data::bias(a, &file),
        Command::Demos(c) => commands::demos::demos(c, &file),
        Command::Sweep(a) => commands::run::sweep(a, &file),
        Command::Serve(a) => commands::serve::serve(a, &file),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = if e.downcast_ref::<ConfigError>().is_some() { 2 } else { 1 };
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
