//! Command-line entry point: config resolution and command dispatch.

mod commands;
pub mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::datasets::DatasetError;
use crate::evalbench::EvalError;
use crate::models::CheckpointError;
use crate::trainer::TrainError;

pub use commands::dispatch;
pub use config::Config;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Io,
    Numeric,
}

impl ErrorKind {
    fn label(self) -> &'static str {
        match self {
            ErrorKind::Config => "config",
            ErrorKind::Io => "io",
            ErrorKind::Numeric => "numeric",
        }
    }
}

/// A failure reported as one `error[<kind>]: <message>` line.
#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: ErrorKind::Config,
            message: message.into(),
        }
    }

    /// Configuration error whose message starts with the offending key.
    pub fn key(key: &str, message: impl fmt::Display) -> Self {
        Self::config(format!("{key}: {message}"))
    }

    pub fn io(path: &Path, err: &dyn fmt::Display) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: format!("{}: {err}", path.display()),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            ErrorKind::Config => 2,
            ErrorKind::Io => 3,
            ErrorKind::Numeric => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn kind_of_train(e: &TrainError) -> ErrorKind {
    match e {
        TrainError::Numeric { .. } => ErrorKind::Numeric,
        TrainError::Io { .. } | TrainError::Checkpoint(_) => ErrorKind::Io,
        _ => ErrorKind::Config,
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        Self {
            kind: kind_of_train(&e),
            message: e.to_string(),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        let kind = match &e {
            EvalError::Run { source, .. } => kind_of_train(source),
            EvalError::Io { .. } | EvalError::Parse(_) => ErrorKind::Io,
            EvalError::Attack(_) | EvalError::Config(_) => ErrorKind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let kind = match e {
            DatasetError::Invalid(_) => ErrorKind::Config,
            _ => ErrorKind::Io,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        Self {
            kind: ErrorKind::Io,
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainTeacher,
    Distill,
    Evaluate,
    StudySaturation,
    StudyCombination,
    StudyAlpha,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::Evaluate => "evaluate",
            Command::StudySaturation => "study-saturation",
            Command::StudyCombination => "study-combination",
            Command::StudyAlpha => "study-alpha",
        }
    }
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Config file of `key = value` lines
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// `key=value` overrides, applied after the config file
    overrides: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(
    name = "mmard",
    about = "Desk-scale adversarial robustness distillation",
    after_help = "Exit status: 0 success, 2 config error, 3 I/O error, 4 numeric failure.\n\
                  The seed falls back to MMARD_SEED when neither the file nor the command line sets it."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate train/test datasets into `data_dir`
    GenData(RunArgs),
    /// Train a teacher (mode = natural, sat or trades)
    TrainTeacher(RunArgs),
    /// Distill a student from `teacher` with `method`
    Distill(RunArgs),
    /// Run the attack battery against `student`
    Evaluate(RunArgs),
    /// Distill every method from every checkpoint in `teachers`
    StudySaturation(RunArgs),
    /// Vanilla vs MMARD-inner runs for each of `methods`
    StudyCombination(RunArgs),
    /// One MMARD run per value in `alphas`
    StudyAlpha(RunArgs),
    /// List every config key with its default
    Keys,
}

/// Parse `args` (program name first), run the command and return the exit status.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let (command, run) = match cli.command {
        Cmd::GenData(a) => (Command::GenData, a),
        Cmd::TrainTeacher(a) => (Command::TrainTeacher, a),
        Cmd::Distill(a) => (Command::Distill, a),
        Cmd::Evaluate(a) => (Command::Evaluate, a),
        Cmd::StudySaturation(a) => (Command::StudySaturation, a),
        Cmd::StudyCombination(a) => (Command::StudyCombination, a),
        Cmd::StudyAlpha(a) => (Command::StudyAlpha, a),
        Cmd::Keys => {
            print!("{}", Config::default().render());
            return 0;
        }
    };
    let result = Config::load(run.config.as_deref(), &run.overrides).and_then(|cfg| dispatch(command, cfg));
    match result {
        Ok(out) => {
            println!("{} done: {}", command.name(), out.display());
            0
        }
        Err(e) => {
            let line = e.message.replace(['\n', '\r'], " ");
            eprintln!("error[{}]: {line}", e.kind.label());
            e.exit_code()
        }
    }
}
