mod args;
mod commands;

use std::process::ExitCode;

use cachemt::eval::PeakAlloc;

use args::{Command, ParseFailure};

#[global_allocator]
static ALLOC: PeakAlloc = PeakAlloc::new();

/// Failure of a subcommand: bad arguments exit with 1, failed runs with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<cachemt::Error> for CliError {
    fn from(e: cachemt::Error) -> Self {
        if e.is_usage() {
            CliError::Usage(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Translate(a) => commands::translate(a),
        Command::ScoreContrastive(a) => commands::score_contrastive(a),
        Command::ProfileMemory(a) => commands::profile_memory(a),
        Command::ExportAssignments(a) => commands::export_assignments(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match args::parse(std::env::args_os().collect()) {
        Ok(cli) => cli,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
        Err(ParseFailure::Other(CliError::Usage(msg) | CliError::Runtime(msg))) => {
            eprintln!("error: {msg}");
            return ExitCode::from(1);
        }
    };
    match run(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
