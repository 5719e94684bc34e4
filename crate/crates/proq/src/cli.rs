//! Command-line front end. Exit status 1 means a stage failed, 2 a bad
//! configuration or usage.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{parse_list, ConfigError, PipelineConfig};
use crate::stages::{RunOptions, Runner, StageFailure};

#[derive(Debug, Parser)]
#[command(name = "proq", version, about = "Cohort, tokenization and transformer pipeline for CKD progression prediction")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// key=value config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub work_dir: Option<PathBuf>,
    /// Comma-separated follow-up periods in days
    #[arg(long, global = true)]
    pub followup: Option<String>,
    /// Comma-separated assessment periods in days
    #[arg(long, global = true)]
    pub assessment: Option<String>,
    /// Write zero wall-clock times in training logs
    #[arg(long, global = true)]
    pub deterministic: bool,
    /// Verify that no token is timed after its example's anchor
    #[arg(long, global = true)]
    pub audit_leakage: bool,
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset into the data dir
    Synth,
    /// Parse and validate the data dir
    Ingest,
    /// Build the cohort manifest
    Cohort,
    /// Split patients and label every grid cell
    Label,
    /// Fit per-concept decile cut points on the train split
    Quantiles,
    /// Write the vocabulary and sequence files
    Tokenize,
    /// Masked-language-model pretraining
    Pretrain,
    /// Fine-tune one model per grid cell
    Finetune,
    /// Score the test split of every grid cell
    Evaluate,
    /// Finetune and evaluate every grid cell, then report
    Grid,
    /// Aggregate per-cell metrics into report.csv
    Report,
    /// Every stage from synth to report
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Ingest => "ingest",
            Command::Cohort => "cohort",
            Command::Label => "label",
            Command::Quantiles => "quantiles",
            Command::Tokenize => "tokenize",
            Command::Pretrain => "pretrain",
            Command::Finetune => "finetune",
            Command::Evaluate => "evaluate",
            Command::Grid => "grid",
            Command::Report => "report",
            Command::All => "all",
        }
    }
}

pub fn build_config(cli: &Cli) -> Result<PipelineConfig, ConfigError> {
    let mut cfg = PipelineConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Invalid(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = d.clone();
    }
    if let Some(d) = &cli.work_dir {
        cfg.work_dir = d.clone();
    }
    if let Some(f) = &cli.followup {
        cfg.followups = parse_list("--followup", f)?;
    }
    if let Some(a) = &cli.assessment {
        cfg.assessments = parse_list("--assessment", a)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run_stage(runner: &Runner, command: Command) -> Result<(), (Command, StageFailure)> {
    let wrap = |r: Result<(), StageFailure>| r.map_err(|e| (command, e));
    match command {
        Command::Synth => wrap(runner.synth().map(|_| ())),
        Command::Ingest => wrap(runner.ingest().map(|_| ())),
        Command::Cohort => wrap(runner.cohort()),
        Command::Label => wrap(runner.label()),
        Command::Quantiles => wrap(runner.quantiles()),
        Command::Tokenize => wrap(runner.tokenize()),
        Command::Pretrain => wrap(runner.pretrain()),
        Command::Finetune => wrap(runner.cfg.grid().map_err(|e| StageFailure::Other(e.to_string())).and_then(|g| {
            g.into_iter().try_for_each(|t| runner.finetune(t))
        })),
        Command::Evaluate => wrap(runner.cfg.grid().map_err(|e| StageFailure::Other(e.to_string())).and_then(|g| {
            g.into_iter().try_for_each(|t| runner.evaluate(t).map(|_| ()))
        })),
        Command::Grid => wrap(runner.grid_run()),
        Command::Report => wrap(runner.report().map(|_| ())),
        Command::All => {
            for c in [
                Command::Synth,
                Command::Ingest,
                Command::Cohort,
                Command::Label,
                Command::Quantiles,
                Command::Tokenize,
                Command::Pretrain,
                Command::Grid,
            ] {
                run_stage(runner, c)?;
            }
            Ok(())
        }
    }
}

/// Parses `args` and runs the selected stage; returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let cfg = match build_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: config: {e}");
            return 2;
        }
    };
    let opts = RunOptions { deterministic: cli.deterministic, audit_leakage: cli.audit_leakage, quiet: cli.quiet };
    match run_stage(&Runner::new(cfg, opts), cli.command) {
        Ok(()) => 0,
        Err((stage, e)) => {
            eprintln!("error: {}: {e}", stage.name());
            1
        }
    }
}
