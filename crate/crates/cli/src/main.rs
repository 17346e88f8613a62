//! `rsparse`: train a toy model, profile it, search a sparsification recipe,
//! decompose, evaluate, benchmark and analyze activation phases.
//!
//! Exit codes: 0 success, 1 numerical failure, 2 usage or input error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rsparse::io::CorpusRule;

pub const THREADS_ENV: &str = "RSPARSE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "rsparse",
    version,
    about = "Rank-aware activation sparsity for linear layers"
)]
pub struct Cli {
    /// Master seed; every subsystem seed is split from it.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (RSPARSE_THREADS overrides).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a toy decoder on a synthetic corpus and write its weights.
    Train(TrainArgs),
    /// Collect per-layer importance scores on calibration data.
    Profile(ProfileArgs),
    /// Decompose every linear layer and write one layer file per layer.
    Decompose(DecomposeArgs),
    /// Evolutionary search for per-layer recipes under a budget.
    Search(SearchArgs),
    /// Dense vs decomposed perplexity and per-layer I/O cost.
    Eval(EvalArgs),
    /// Time dense against gathered matvecs.
    Bench(BenchArgs),
    /// Output error of the multi-phase activation at matched sparsity.
    AnalyzePhases(PhaseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CorpusArgs {
    /// Synthetic corpus rule: markov2 or uniform.
    #[arg(long, default_value = "markov2")]
    pub corpus_rule: CorpusRule,
    /// Corpus seed; split from --seed when absent.
    #[arg(long)]
    pub corpus_seed: Option<u64>,
    /// Corpus length in tokens.
    #[arg(long)]
    pub corpus_len: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrationArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Calibration sequence length; the first half is prefilled densely.
    #[arg(long, default_value_t = 128)]
    pub seq_len: usize,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub warmup: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 64)]
    pub embed: usize,
    #[arg(long, default_value_t = 172)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq_len: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub calib: CalibrationArgs,
    /// Output directory for score files.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write axis-sorted heatmap CSVs.
    #[arg(long)]
    pub heatmaps: bool,
}

/// Where per-layer plans come from: a recipe file, a uniform budget and rho,
/// or one explicit (keep, rank) for every layer.
#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    #[arg(long, conflicts_with_all = ["budget", "keep", "rank"])]
    pub recipe: Option<PathBuf>,
    /// Uniform budget C.
    #[arg(long, conflicts_with_all = ["keep", "rank"])]
    pub budget: Option<f64>,
    /// Uniform rho used with --budget.
    #[arg(long, default_value_t = rsparse::search::BASELINE_RHO)]
    pub rho: f64,
    /// Keep fraction s for every layer.
    #[arg(long, requires = "rank")]
    pub keep: Option<f64>,
    /// Rank r for every layer.
    #[arg(long, requires = "keep")]
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    #[command(flatten)]
    pub calib: CalibrationArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Groupwise,
    Joint,
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub calib: CalibrationArgs,
    /// Budget C applied to every layer.
    #[arg(long)]
    pub budget: f64,
    #[arg(long, default_value_t = 32)]
    pub pop: usize,
    #[arg(long, visible_alias = "generations", default_value_t = 5)]
    pub gens: usize,
    #[arg(long, default_value_t = 0.5)]
    pub pm: f64,
    #[arg(long, default_value_t = 0.5)]
    pub pc: f64,
    #[arg(long, default_value_t = 28)]
    pub group_size: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Groupwise)]
    pub mode: ModeArg,
    /// Number of calibration sequences.
    #[arg(long, default_value_t = 16)]
    pub sequences: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub calib: CalibrationArgs,
    #[command(flatten)]
    pub plan: PlanArgs,
    /// Evaluation corpus seed; split from --seed when absent.
    #[arg(long)]
    pub eval_seed: Option<u64>,
    /// Evaluation corpus length in tokens.
    #[arg(long, default_value_t = 2048)]
    pub eval_len: usize,
    /// Output directory for layers.csv and summary.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 4096)]
    pub m_in: usize,
    #[arg(long, default_value_t = 4096)]
    pub m_out: usize,
    /// Keep fractions to time.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,0.75")]
    pub keep: Vec<f64>,
    #[arg(long, default_value_t = 15)]
    pub reps: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct PhaseArgs {
    #[command(flatten)]
    pub calib: CalibrationArgs,
    /// Threshold counts to compare.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub levels: Vec<usize>,
    /// Fraction of activations changed by the first threshold.
    #[arg(long, default_value_t = 0.9)]
    pub sparsity: f64,
    /// Fixed first threshold instead of the calibrated one.
    #[arg(long)]
    pub t0: Option<f64>,
    /// Number of sequences analyzed.
    #[arg(long, default_value_t = 4)]
    pub sequences: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => bail!("{THREADS_ENV}={v:?} is not a positive integer"),
        },
        Err(_) => match flag {
            Some(0) => bail!("--threads must be at least 1"),
            other => Ok(other),
        },
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let numerical = err.chain().any(|e| {
        e.downcast_ref::<rsparse::Error>()
            .is_some_and(rsparse::Error::is_numerical)
    });
    if numerical {
        1
    } else {
        2
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = thread_count(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    commands::dispatch(&cli)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
