//! `vla`: data generation, annotation, training, evaluation, ablations,
//! latency probes and trace inspection over a run directory.

mod commands;
mod run_dir;

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use vla_core::annotator::ReasoningFormat;
use vla_core::config::RunConfig;
use vla_core::training::Stage;

use run_dir::RunDir;

#[derive(Parser)]
#[command(name = "vla", version, about = "Reasoning-guided VLA pipeline at desk scale")]
struct Cli {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Parent of all run directories.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run name; outputs go to `<out>/<run>/`.
    #[arg(long, global = true, default_value = "default")]
    run: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Intention,
    Spatial,
    Compact,
}

impl From<FormatArg> for ReasoningFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Intention => ReasoningFormat::Intention,
            FormatArg::Spatial => ReasoningFormat::Spatial,
            FormatArg::Compact => ReasoningFormat::Compact,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Stage1,
    Stage2,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations and a manifest.
    GenData,
    /// Annotate demonstrations with reasoning in every configured format.
    Annotate {
        /// Leave a format out of the dataset (repeatable).
        #[arg(long, value_enum)]
        omit: Vec<FormatArg>,
        /// Annotate on a single thread.
        #[arg(long)]
        serial: bool,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Stage-1 checkpoint for stage 2 (default: the run's own).
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Success-rate table over the in-distribution tasks.
    Eval {
        /// Checkpoint directory (default: the run's stage-2 checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pretraining-data and finetuning-strategy ablations.
    Ablate,
    /// Compact vs intention-chain conditioning latency.
    Latency {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print a rollout trace step by step.
    Inspect {
        trace: PathBuf,
        #[arg(long)]
        episode: Option<String>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::Inspect { trace, episode } = &cli.command {
        print!("{}", commands::inspect(trace, episode.as_deref())?);
        return Ok(());
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display()))?,
        None => RunConfig::default(),
    };
    // Unknown task names are configuration errors, caught before any work.
    cfg.selected_tasks(&cfg.task_bank()?)?;
    let run = RunDir::prepare(&cli.out, &cli.run, &cfg)?;
    match cli.command {
        Command::GenData => {
            let m = commands::gen_data(&cfg, &run)?;
            println!(
                "{} demos ({} steps) over {} tasks -> {}",
                m.total_demos,
                m.total_steps,
                m.tasks.len(),
                run.path("data").display()
            );
        }
        Command::Annotate { omit, serial } => {
            let omit: Vec<ReasoningFormat> = omit.into_iter().map(Into::into).collect();
            let r = commands::annotate(&cfg, &run, &omit, serial)?;
            for (f, n) in &r.samples {
                println!("{:<10} {n}", f.as_str());
            }
            if !r.skipped.is_empty() {
                println!("skipped {} trajectories:", r.skipped.len());
                for (id, why) in &r.skipped {
                    println!("  {id}: {why}");
                }
            }
        }
        Command::Train { stage, stage1 } => {
            let stage = match stage {
                StageArg::Stage1 => Stage::Stage1,
                StageArg::Stage2 => Stage::Stage2,
            };
            let hash = commands::train(&cfg, &run, stage, stage1.as_deref())?;
            println!("{} checkpoint {hash}", stage.as_str());
        }
        Command::Eval { checkpoint } => {
            let t = commands::eval(&cfg, &run, checkpoint.as_deref())?;
            print!("{}", t.to_text());
        }
        Command::Ablate => {
            let (a, b) = commands::ablate(&cfg, &run)?;
            print!("{}\n{}", a.to_text(), b.to_text());
        }
        Command::Latency { checkpoint } => {
            print!("{}", commands::latency(&cfg, &run, checkpoint.as_deref())?);
        }
        Command::Inspect { .. } => unreachable!("handled above"),
    }
    Ok(())
}
