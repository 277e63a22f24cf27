//! `semdi` command-line tool.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semdi::corpus::SplitMode;
use semdi::encoding::MaskedEvent;
use semdi::pipeline::Variant;

use crate::commands::{InspectArgs, SweepArgs};
use crate::config::TrainFlags;

/// An error with the exit code it maps to: 2 for bad usage, input or I/O,
/// 1 for failures while running.
pub struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 2, error: e.into() }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self { code: 1, error: e.into() }
    }
}

#[derive(Parser)]
#[command(name = "semdi", version, about = "Event causality identification by semantic dependency inquiry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CvFlags {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
    /// Split mode: ood (topic-disjoint) or id (shuffled)
    #[arg(long)]
    mode: Option<SplitMode>,
    /// Number of folds
    #[arg(long)]
    k: Option<usize>,
    /// Folds trained concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl CvFlags {
    fn resolve(&self) -> anyhow::Result<config::RunConfig> {
        let mut run = self.train.resolve()?;
        if let Some(m) = self.mode {
            run.split.mode = m;
        }
        if let Some(k) = self.k {
            run.split.k = k;
        }
        Ok(run)
    }
}

#[derive(clap::Args)]
struct InspectFlags {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Example index in corpus order
    #[arg(long)]
    index: usize,
    /// Masked event; defaults to the checkpoint's masking strategy
    #[arg(long, value_parser = parse_event)]
    event: Option<MaskedEvent>,
    /// Seed for the random mask draw (falls back to SEMDI_SEED)
    #[arg(long)]
    seed: Option<u64>,
}

impl From<InspectFlags> for InspectArgs {
    fn from(f: InspectFlags) -> Self {
        InspectArgs {
            ckpt: f.ckpt,
            corpus: f.corpus,
            index: f.index,
            event: f.event,
            seed: f.seed,
        }
    }
}

fn parse_event(s: &str) -> Result<MaskedEvent, String> {
    match s {
        "e1" => Ok(MaskedEvent::E1),
        "e2" => Ok(MaskedEvent::E2),
        other => Err(format!("unknown event {other:?} (e1|e2)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cue corpus as JSONL
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 4)]
        topics: usize,
        #[arg(long, default_value_t = 1)]
        pairs_per_doc: usize,
        /// Falls back to SEMDI_SEED, then 42
        #[arg(long)]
        seed: Option<u64>,
        /// Make half the cues topic-specific
        #[arg(long)]
        topic_cues: bool,
    },
    /// Train one model with a topic-disjoint dev set and save a checkpoint
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        train: TrainFlags,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// JSONL training log (stdout when absent)
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Cross-validate one variant
    Cv {
        #[command(flatten)]
        cv: CvFlags,
        #[arg(long, default_value = "full")]
        variant: Variant,
        /// Report JSON (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Plain-text table
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Cross-validate every variant under one fold plan
    Ablate {
        #[command(flatten)]
        cv: CvFlags,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Cross-validate under each masking strategy
    MaskSweep {
        #[command(flatten)]
        cv: CvFlags,
        #[arg(long, default_value = "full")]
        variant: Variant,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Export inquiry attention weights for one example
    Heatmap {
        #[command(flatten)]
        inspect: InspectFlags,
        /// JSON export (stdout when absent)
        #[arg(long)]
        out: Option<PathBuf>,
        /// Text grid
        #[arg(long)]
        grid: Option<PathBuf>,
    },
    /// Nearest words to the fill-in token of one example
    Readout {
        #[command(flatten)]
        inspect: InspectFlags,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Synth {
            out,
            docs,
            topics,
            pairs_per_doc,
            seed,
            topic_cues,
        } => commands::synth(commands::SynthArgs {
            out,
            docs,
            topics,
            pairs_per_doc,
            seed,
            topic_cues,
        }),
        Command::Train {
            corpus,
            train,
            variant,
            out,
            log,
        } => commands::train_cmd(commands::TrainArgs {
            corpus,
            run: train.resolve().map_err(Failure::usage)?,
            variant,
            out,
            log,
        }),
        Command::Cv { cv, variant, out, table } => commands::cv(commands::CvArgs {
            run: cv.resolve().map_err(Failure::usage)?,
            corpus: cv.corpus,
            variant,
            jobs: cv.jobs,
            out,
            table,
        }),
        Command::Ablate { cv, out_dir } => commands::ablate(SweepArgs {
            run: cv.resolve().map_err(Failure::usage)?,
            corpus: cv.corpus,
            jobs: cv.jobs,
            out_dir,
        }),
        Command::MaskSweep { cv, variant, out_dir } => commands::mask_sweep(
            SweepArgs {
                run: cv.resolve().map_err(Failure::usage)?,
                corpus: cv.corpus,
                jobs: cv.jobs,
                out_dir,
            },
            variant,
        ),
        Command::Heatmap { inspect, out, grid } => commands::heatmap_cmd(inspect.into(), out, grid),
        Command::Readout { inspect, k, out } => commands::readout_cmd(inspect.into(), k, out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
