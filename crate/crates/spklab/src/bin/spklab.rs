//! Command-line front end for the experiment stages.
//!
//! Each subcommand is one pipeline stage over a run directory; `run` chains
//! all of them. Stages communicate only through files, so
//! `gen-data && train && score && select && fuse && eval && report` with the
//! same flags produces byte-for-byte the same directory as a single `run`.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use spklab::experiment::{render_text, CorpusSource};
use spklab::{
    load_config, run_experiment, stage_eval, stage_fuse, stage_gen, stage_report, stage_score,
    stage_select, stage_train, ExperimentConfig, HeadKind,
};

#[derive(Parser)]
#[command(
    name = "spklab",
    version,
    about = "Open-set speaker identification lab: synthetic corpora, adapter pools, \
             score fusion, spectral selection, open-set metrics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or import) the embedding corpus and carve evaluation splits.
    GenData(StageArgs),
    /// Train the candidate pools for every split.
    Train(StageArgs),
    /// Score baselines and every pool candidate into score sheets.
    Score(StageArgs),
    /// Diagnose candidate point-set spectra and pick fusion members.
    Select(StageArgs),
    /// Fuse the main pool's score sheets (all members and selected members).
    Fuse(StageArgs),
    /// Compute open-set metrics for every score sheet.
    Eval(StageArgs),
    /// All stages end to end; exits nonzero if any split is incomplete.
    Run(StageArgs),
    /// Re-render the report from whatever the run directory already holds.
    Report(ReportArgs),
}

#[derive(Args)]
struct StageArgs {
    /// Experiment config, JSON.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Run directory that receives (and feeds) stage artifacts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Override every seed: corpus N, splits N+1, training base (N+2)*1000.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Override the candidate pool size.
    #[arg(long, value_name = "N")]
    candidates: Option<usize>,
    /// Override the scoring head: rp, cp or mean.
    #[arg(long, value_name = "HEAD")]
    head: Option<HeadKind>,
    /// Override the adaptive anchor budget of the main pool.
    #[arg(long, value_name = "N")]
    anchors: Option<usize>,
    /// Override the per-metric discard fraction used by selection.
    #[arg(long, value_name = "F")]
    discard_fraction: Option<f64>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory holding a config echo and stage artifacts.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

/// Load the config file and fold the command-line overrides in, then
/// re-validate so an override cannot smuggle in an inconsistent setup.
fn load_with_overrides(args: &StageArgs) -> anyhow::Result<ExperimentConfig> {
    let mut config = load_config(&args.config)
        .with_context(|| format!("reading config {}", args.config.display()))?;
    if let Some(seed) = args.seed {
        if let CorpusSource::Generate(corpus) = &mut config.corpus {
            corpus.seed = seed;
        }
        config.split_seed = Some(seed.wrapping_add(1));
        config.train.base_seed = seed.wrapping_add(2).wrapping_mul(1000);
    }
    if let Some(n) = args.candidates {
        config.train.n_candidates = n;
    }
    if let Some(head) = args.head {
        config.head = head;
    }
    if let Some(n) = args.anchors {
        config.train.anchor_count = n;
        config.train.flags.adaptive_anchors = n > 0;
    }
    if let Some(f) = args.discard_fraction {
        config.discard_fraction = f;
    }
    config.validate().context("after command-line overrides")?;
    Ok(config)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn real_main() -> anyhow::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData(args) => {
            let config = load_with_overrides(&args)?;
            stage_gen(&config, &args.out)?;
            println!("gen-data: corpus and splits written under {}", args.out.display());
        }
        Command::Train(args) => {
            let config = load_with_overrides(&args)?;
            stage_train(&config, &args.out)?;
            println!("train: candidate pools written under {}", args.out.display());
        }
        Command::Score(args) => {
            let config = load_with_overrides(&args)?;
            stage_score(&config, &args.out)?;
            println!("score: score sheets written under {}", args.out.display());
        }
        Command::Select(args) => {
            let config = load_with_overrides(&args)?;
            stage_select(&config, &args.out)?;
            println!("select: spectral selection written under {}", args.out.display());
        }
        Command::Fuse(args) => {
            let config = load_with_overrides(&args)?;
            stage_fuse(&config, &args.out)?;
            println!("fuse: fused sheets written under {}", args.out.display());
        }
        Command::Eval(args) => {
            let config = load_with_overrides(&args)?;
            stage_eval(&config, &args.out)?;
            println!("eval: per-split metrics written under {}", args.out.display());
        }
        Command::Run(args) => {
            let config = load_with_overrides(&args)?;
            let report = run_experiment(&config, &args.out)?;
            print!("{}", render_text(&report));
            let incomplete: Vec<_> = report.splits.iter().filter(|s| !s.complete).collect();
            if !incomplete.is_empty() {
                for split in incomplete {
                    match &split.failure {
                        Some(f) => eprintln!(
                            "split {} failed during {}: {}",
                            f.split_index, f.stage, f.error
                        ),
                        None => eprintln!("split {}: metrics missing", split.split_index),
                    }
                }
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Report(args) => {
            let report = stage_report(&args.out)?;
            print!("{}", render_text(&report));
        }
    }
    Ok(ExitCode::SUCCESS)
}
