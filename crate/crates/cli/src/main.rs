use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use commands::{analyze, decode, demo, eval, train};
use config::FileConfig;

/// Attention-guided context decoding workflows.
#[derive(Parser, Debug)]
#[command(name = "dagcd", version, about)]
struct Cli {
    /// TOML file with default values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a context utilization detector.
    TrainDetector(train::Args),
    /// Decode with a toy model or a recorded trace.
    Decode(decode::Args),
    /// Score predictions against a QA dataset.
    Eval(eval::Args),
    /// Produce a diagnostic report.
    Analyze(analyze::Args),
    /// Plant scenarios, train a detector and compare greedy with guided decoding.
    ToyDemo(demo::Args),
}

/// Input or usage problem the user can fix; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    use dagcd_core::Error as E;
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Io(_) | E::Json(_) | E::Csv(_) | E::Oracle { .. } => 1,
                _ => 2,
            };
        }
    }
    1
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = FileConfig::load(cli.config.as_deref()).and_then(|cfg| match cli.command {
        Command::TrainDetector(a) => train::run(a, &cfg),
        Command::Decode(a) => decode::run(a, &cfg),
        Command::Eval(a) => eval::run(a, &cfg),
        Command::Analyze(a) => analyze::run(a, &cfg),
        Command::ToyDemo(a) => demo::run(a, &cfg),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
