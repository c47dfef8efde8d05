use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradspect::quality::{QualityMetric, DEFAULT_K};
use gradspect::store::Dtype;

mod commands;

/// Spectral analysis of per-sample attention projection gradients.
#[derive(Debug, Parser)]
#[command(name = "gradspect", version)]
struct Cli {
    /// Worker threads for per-sample work (default: available parallelism).
    #[arg(long, global = true, env = "GRADSPECT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the toy decoder on a synthetic corpus and dump per-sample gradients.
    DumpToy(DumpToyArgs),
    /// Summarize a GRDS file into a table CSV and a per-layer curve CSV.
    Analyze(AnalyzeArgs),
    /// Label the top-k and bottom-k samples of a score file in a manifest.
    Partition(PartitionArgs),
    /// Subtract two table CSVs row by row.
    Compare(CompareArgs),
    /// Score instructions from a JSONL file with an external chat endpoint.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Overwrite existing output files.
    #[arg(long, env = "GRADSPECT_FORCE")]
    force: bool,
}

#[derive(Debug, Args)]
pub struct DumpToyArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0, env = "GRADSPECT_SEED")]
    seed: u64,
    /// Comma-separated corpus modes: clean, shuffled, chain, answer_only.
    #[arg(long, default_value = "clean", value_delimiter = ',')]
    mode: Vec<String>,
    /// Samples per dumped corpus.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// Clean samples used to fit the model before dumping.
    #[arg(long, default_value_t = 200)]
    fit_count: usize,
    #[arg(long, default_value_t = 200)]
    fit_steps: usize,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value = "f64", env = "GRADSPECT_DTYPE")]
    dtype: Dtype,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// GRDS file to analyze.
    #[arg(long)]
    input: PathBuf,
    /// Manifest with high/low subset labels.
    #[arg(long, conflicts_with = "baseline")]
    manifest: Option<PathBuf>,
    /// Second GRDS file used as the low side of the gap table.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Dataset label for the table (default: input file stem).
    #[arg(long)]
    dataset: Option<String>,
    /// Only use manifest labels of this metric.
    #[arg(long)]
    metric: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct PartitionArgs {
    /// Score CSV (`sample_id,metric,value`).
    #[arg(long)]
    input: PathBuf,
    /// Manifest to label.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, env = "GRADSPECT_METRIC")]
    metric: QualityMetric,
    #[arg(long, default_value_t = DEFAULT_K, env = "GRADSPECT_K")]
    k: usize,
    /// Path of the labeled manifest.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Table CSV of run A.
    #[arg(long)]
    input: PathBuf,
    /// Table CSV of run B; differences are A - B.
    #[arg(long)]
    against: PathBuf,
    /// Difference CSV path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// JSONL with `id`, `instruction`, `response` fields.
    #[arg(long)]
    input: PathBuf,
    /// instag or difficulty.
    #[arg(long, env = "GRADSPECT_METRIC")]
    metric: QualityMetric,
    #[arg(long, env = "GRADSPECT_SCORER_URL")]
    scorer_url: String,
    #[arg(long, env = "GRADSPECT_SCORER_MODEL")]
    scorer_model: String,
    /// Requests in flight at once.
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Score CSV path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    output: OutputArgs,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                commands::EXIT_USAGE
            } else {
                0
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(commands::EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(commands::EXIT_USAGE);
        }
    }
    let result = match &cli.command {
        Command::DumpToy(a) => commands::dump_toy(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Partition(a) => commands::partition(a),
        Command::Compare(a) => commands::compare(a),
        Command::Score(a) => commands::score(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
