//! Subcommands of the `roadseg` binary.

pub mod commands;
pub mod config;
pub mod demo;
pub mod run_dir;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub use config::ExperimentConfig;
pub use run_dir::RunDir;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or arguments.
    Usage(String),
    /// Invalid or inconsistent configuration.
    Config(String),
    /// Anything that went wrong while doing the work.
    Runtime(String),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Runtime(m) => write!(f, "{m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Runtime(format!("{}: {e}", path.display()))
    }
}

impl From<roadseg::Error> for CliError {
    fn from(e: roadseg::Error) -> Self {
        match e {
            roadseg::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "roadseg", version, about = "Binary road segmentation: prepare, train, evaluate, report")]
pub struct Cli {
    /// Experiment configuration (TOML). Defaults to `<out>/config.toml`.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Overrides the configured run directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Redo work whose outputs already exist.
    #[arg(long, global = true)]
    pub force: bool,
    /// Compute device. Only `cpu` is available.
    #[arg(long, global = true, value_name = "NAME", default_value = "cpu")]
    pub device: String,
    /// Model weights. Defaults to the run's trained checkpoint.
    #[arg(long, global = true, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset to cross-evaluate on.
    #[arg(long = "foreign-dataset", global = true, value_name = "NAME")]
    pub foreign_dataset: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Binarize labels, cache masks and write the split of every dataset.
    Prepare,
    /// Train the configured model on the training dataset.
    Train,
    /// Evaluate on the training dataset's test split.
    Eval,
    /// Evaluate on every sample of a foreign dataset.
    Crosseval,
    /// Write results tables, training curves and the error gallery.
    Report,
}

/// Loads the configuration and applies command-line overrides; flags win.
pub fn resolve_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    if cli.device != "cpu" {
        return Err(CliError::Usage(format!(
            "device `{}` is not available; this build runs on `cpu` only",
            cli.device
        )));
    }
    let path = match (&cli.config, &cli.out) {
        (Some(p), _) => p.clone(),
        (None, Some(out)) => RunDir::new(out).config(),
        (None, None) => {
            return Err(CliError::Usage("pass --config, or --out pointing at an existing run".into()));
        }
    };
    let mut cfg = ExperimentConfig::load(&path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
    }
    if cli.foreign_dataset.is_some() {
        cfg.eval.foreign_dataset = cli.foreign_dataset.clone();
    }
    cfg.train.seed = cfg.seed;
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli)?;
    let opts = commands::Options {
        force: cli.force,
        checkpoint: cli.checkpoint.clone(),
        foreign_dataset: cli.foreign_dataset.clone(),
    };
    match cli.command {
        Command::Prepare => commands::prepare(&cfg, &opts).map(|_| ()),
        Command::Train => commands::train(&cfg, &opts).map(|_| ()),
        Command::Eval => commands::eval(&cfg, &opts).map(|_| ()),
        Command::Crosseval => commands::crosseval(&cfg, &opts).map(|_| ()),
        Command::Report => commands::report(&cfg, &opts).map(|_| ()),
    }
}

/// Entry point shared by the binary: parses `args`, runs the command and
/// maps failures to exit codes (1 usage/config, 2 runtime).
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
