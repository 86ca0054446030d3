use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use seqdistill::config::PipelineConfig;
use seqdistill::corpus;
use seqdistill::pipeline::{self, Command, Pipeline, PipelineError, RunOptions};

/// Data curation pipeline for sequence-level distillation.
#[derive(Debug, Parser)]
#[command(name = "seqdistill", version)]
struct Cli {
    /// TOML config; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Use the built-in deterministic mock models.
    #[arg(long, global = true)]
    mock: bool,
    /// Write per-record verdicts and log progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,
    /// Build one stage from the low-temperature pool only.
    #[arg(long, global = true)]
    single_stage: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Sample teacher candidates at both temperatures.
    Sample,
    /// Score kept responses sentence by sentence under each model.
    Score,
    /// Label sentences as teacher, student, shared or boosted.
    Classify,
    /// Rank scored candidates and select under quota and budget.
    Select,
    /// Normalize and filter the sampled pools.
    Filter,
    /// Write stage datasets and manifests from the selections.
    BuildStages,
    /// Regenerate with the student, truncate cut-off responses and continue with the teacher.
    MixedPolicy,
    /// Write likelihood, position-profile and cut-off CSVs.
    Analyze,
    /// Run the toy sequence-level KL experiments.
    Oracle,
    /// Write a deterministic question file for mock runs.
    MockQuestions {
        #[arg(long, default_value_t = 50)]
        count: usize,
        /// Output path; defaults to the configured questions file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.apply_env();
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Vec<String>, PipelineError> {
    let cfg = load_config(&cli)?;
    let command = match &cli.command {
        Cmd::Sample => Command::Sample,
        Cmd::Score => Command::Score,
        Cmd::Classify => Command::Classify,
        Cmd::Select => Command::Select,
        Cmd::Filter => Command::Filter,
        Cmd::BuildStages => Command::BuildStages,
        Cmd::MixedPolicy => Command::MixedPolicy,
        Cmd::Analyze => Command::Analyze,
        Cmd::Oracle => Command::Oracle,
        Cmd::MockQuestions { count, out } => {
            cfg.validate()?;
            let path = out.clone().unwrap_or_else(|| cfg.paths.questions.clone());
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)
                    .map_err(|e| PipelineError::Runtime(format!("{}: {e}", dir.display())))?;
            }
            let n = corpus::write_records(&pipeline::mock_questions(*count, cfg.seed), &path)?;
            return Ok(vec![format!("{}: {n} records", path.display())]);
        }
    };
    let opts = RunOptions {
        mock: cli.mock,
        verbose: cli.verbose,
        single_stage: cli.single_stage,
    };
    Pipeline::new(cfg, opts)?.run(command)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
