//! `deformer` — train a QA encoder, split its lower layers per segment,
//! cache passage representations, and measure what that buys.
//!
//! Every knob is a long flag and a settings-file key (`--config FILE`,
//! key=value lines); flags override the file. Artifacts live under a run
//! directory with per-stage manifests, so reruns skip work that is already
//! up to date and stale artifacts are refused with the stage to rerun.

mod gen;
mod manifest;
mod pipeline;
mod report;
mod settings;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use deformer_core::Result;
use settings::{Overrides, Resolved};

#[derive(Parser)]
#[command(
    name = "deformer",
    version,
    about = "Decomposed QA encoder pipeline: generate data, train, split, cache, and measure"
)]
struct Cli {
    /// Settings file of key=value lines; command-line flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic key→value QA splits and vocabulary.
    GenData(Overrides),
    /// Train the full-attention teacher on gold spans.
    TrainTeacher(Overrides),
    /// Initialize the decomposed model from the teacher and self-check equivalence.
    Decompose(Overrides),
    /// Fine-tune the decomposed model with distillation losses.
    Finetune(Overrides),
    /// Precompute and store passage representations at the split layer.
    EncodeCache(Overrides),
    /// Search loss weights (gamma, alpha, beta) with the surrogate-guided tuner.
    Tune(Overrides),
    /// Score teacher and decomposed model on the dev split, cached and inline.
    Eval(Overrides),
    /// Analytic FLOPs, activation memory, and speedup for a model shape.
    Profile(Overrides),
    /// Dollar cost of serving with and without cached passages.
    Cost {
        #[command(flatten)]
        over: Overrides,
        /// Also write the numbers as a line-delimited JSON record.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Representation-variance and teacher–student divergence profiles.
    Analyze(Overrides),
    /// Run stages in dependency order, skipping up-to-date ones.
    Pipeline {
        #[command(flatten)]
        over: Overrides,
        /// Comma-separated subset of data,teacher,decompose,finetune,cache,eval,profile,analyze.
        #[arg(long, value_name = "LIST")]
        stages: Option<String>,
        /// Rerun selected stages even when their artifacts are up to date.
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config = cli.config.as_deref();
    let resolved = |over: &Overrides| Resolved::new(config, over);
    match &cli.cmd {
        Cmd::GenData(o) => stages::stage_data(&resolved(o)?),
        Cmd::TrainTeacher(o) => stages::stage_teacher(&resolved(o)?),
        Cmd::Decompose(o) => stages::stage_decompose(&resolved(o)?),
        Cmd::Finetune(o) => stages::stage_finetune(&resolved(o)?),
        Cmd::EncodeCache(o) => stages::stage_cache(&resolved(o)?),
        Cmd::Tune(o) => stages::cmd_tune(&resolved(o)?),
        Cmd::Eval(o) => stages::stage_eval(&resolved(o)?),
        Cmd::Profile(o) => stages::stage_profile(&resolved(o)?),
        Cmd::Cost { over, out } => stages::cmd_cost(&resolved(over)?, out.as_deref()),
        Cmd::Analyze(o) => stages::stage_analyze(&resolved(o)?),
        Cmd::Pipeline { over, stages, force } => {
            pipeline::run_pipeline(&resolved(over)?, stages.as_deref(), *force)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
