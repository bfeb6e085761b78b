//! Command implementations behind the `detkit` binary.

pub mod args;
pub mod commands;
pub mod config;
pub mod demo;

use std::fmt;
use std::io::Write;
use std::process::ExitCode;

use args::{Cli, Command};
use config::FileConfig;

pub const TOOL_NAME: &str = "detkit";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit status 2 for bad input or configuration, 1 for a failed check.
#[derive(Debug)]
pub enum CliError {
    Input(String),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Verification(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "{m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<detkit_core::Error> for CliError {
    fn from(e: detkit_core::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

/// Shared state for one invocation.
pub struct Context<'a> {
    pub file: FileConfig,
    pub seed: u64,
    pub out: Option<std::path::PathBuf>,
    pub quiet: bool,
    pub stdout: &'a mut (dyn Write + Send),
}

impl Context<'_> {
    /// Writes a summary line unless `--quiet`.
    pub fn say(&mut self, line: &str) -> Result<(), CliError> {
        if !self.quiet {
            writeln!(self.stdout, "{line}").map_err(|e| CliError::Input(format!("stdout: {e}")))?;
        }
        Ok(())
    }

    pub fn require_out(&self, what: &str) -> Result<std::path::PathBuf, CliError> {
        self.out
            .clone()
            .ok_or_else(|| CliError::Input(format!("--out is required to write {what}")))
    }
}

/// Runs a parsed command line, writing summaries to `stdout`.
pub fn run(cli: Cli, stdout: &mut (dyn Write + Send)) -> Result<(), CliError> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let threads = cli.threads.or(file.threads);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be positive".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| CliError::Input(format!("cannot start thread pool: {e}")))?;
    let mut ctx = Context {
        seed: config::pick(cli.seed, file.seed, config::DEFAULT_SEED),
        file,
        out: cli.out,
        quiet: cli.quiet,
        stdout,
    };
    pool.install(|| match cli.command {
        Command::Gamma(a) => commands::gamma(&mut ctx, a),
        Command::Upsample(a) => commands::upsample(&mut ctx, a),
        Command::SsmCheck(a) => commands::ssm_check(&mut ctx, a),
        Command::LossCheck(a) => commands::loss_check(&mut ctx, a),
        Command::Eval(a) => commands::eval(&mut ctx, a),
        Command::Stats(a) => commands::stats(&mut ctx, a),
        Command::Synth(a) => commands::synth(&mut ctx, a),
        Command::Demo(a) => demo::command(&mut ctx, a),
    })
}

/// Entry point shared by the binary: parse, run, map errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    use clap::Parser;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let mut stdout = std::io::stdout();
    match run(cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
