//! The `cfeg` command line: stage wiring, config and run manifest.

pub mod config;
pub mod manifest;
pub mod stages;

use clap::{Parser, Subcommand};
use config::Config;
use manifest::Workspace;
use std::path::PathBuf;
use thiserror::Error;

/// Failure classes with their own exit codes.
#[derive(Debug, Error)]
pub enum Failure {
    #[error("config error: {0}")]
    Config(String),
    #[error("backend error: {0}")]
    Backend(String),
    #[error("digest mismatch: {0}")]
    Digest(String),
}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Failure>() {
        Some(Failure::Config(_)) => 2,
        Some(Failure::Backend(_)) => 3,
        Some(Failure::Digest(_)) => 4,
        None => 1,
    }
}

fn parse_strategy(s: &str) -> Result<cfeg_core::orchestrator::Strategy, String> {
    s.parse().map_err(|e: cfeg_core::orchestrator::OrchestratorError| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "cfeg", version, about = "Cause-aware empathetic generation pipeline")]
pub struct Cli {
    /// Run configuration file.
    #[arg(short, long, default_value = "cfeg.toml")]
    pub config: PathBuf,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Import the raw corpus into canonical dialogues.
    Ingest,
    /// Dialogue-level train/valid/test split.
    Split,
    /// Emotion-cause span for every dialogue.
    AnnotateCauses,
    /// Commonsense bundles (cause-oriented and last-utterance).
    GenKnowledge,
    /// Write every strategy's prompts without calling a model.
    BuildPrompts,
    /// Instruction-tuning pairs for the train split.
    ExportSft,
    /// Generate responses for each strategy and seed.
    Infer {
        /// Restrict to these strategies (repeatable).
        #[arg(long, value_parser = parse_strategy)]
        strategy: Vec<cfeg_core::orchestrator::Strategy>,
    },
    /// Score predictions and write the comparison table.
    Evaluate,
    /// Create (once) and serve the human-evaluation session.
    ServeHumaneval {
        /// Create the session and exit without serving.
        #[arg(long)]
        setup_only: bool,
    },
    /// Print the metric table and any A/B results.
    Report,
    /// Every stage from ingest to report.
    Pipeline,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(&cli.config)?;
    let resolved = serde_json::to_value(&cfg)?;
    let mut ws = Workspace::open(&cfg.run.out_dir, resolved, cli.force)?;
    match cli.command {
        Command::Ingest => stages::ingest(&mut ws, &cfg).map(drop),
        Command::Split => stages::split(&mut ws, &cfg).map(drop),
        Command::AnnotateCauses => stages::annotate_causes(&mut ws, &cfg).map(drop),
        Command::GenKnowledge => stages::gen_knowledge(&mut ws, &cfg).map(drop),
        Command::BuildPrompts => stages::build_prompts(&mut ws, &cfg).map(drop),
        Command::ExportSft => stages::export_sft_stage(&mut ws, &cfg).map(drop),
        Command::Infer { strategy } => stages::infer(&mut ws, &cfg, &strategy).map(drop),
        Command::Evaluate => stages::evaluate(&mut ws, &cfg).map(drop),
        Command::ServeHumaneval { setup_only } => stages::serve_humaneval(&mut ws, &cfg, setup_only),
        Command::Report => {
            print!("{}", stages::report(&mut ws, &cfg)?);
            Ok(())
        }
        Command::Pipeline => {
            stages::ingest(&mut ws, &cfg)?;
            stages::split(&mut ws, &cfg)?;
            stages::annotate_causes(&mut ws, &cfg)?;
            stages::gen_knowledge(&mut ws, &cfg)?;
            stages::build_prompts(&mut ws, &cfg)?;
            stages::export_sft_stage(&mut ws, &cfg)?;
            stages::infer(&mut ws, &cfg, &[])?;
            stages::evaluate(&mut ws, &cfg)?;
            print!("{}", stages::report(&mut ws, &cfg)?);
            Ok(())
        }
    }
}
