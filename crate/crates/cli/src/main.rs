//! `mvr`: generate data, train, index, search, evaluate and diagnose
//! multi-view dense retrievers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mvr_core::encoder::ViewMode;
use mvr_core::eval::ScoreNormalization;
use mvr_core::MvrError;

use config::{IndexMode, MissingFile, UsageError};

#[derive(Debug, Parser)]
#[command(name = "mvr", version, about = "Multi-view dense retrieval")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic multi-topic corpus with train and eval queries.
    GenSynthetic(GenArgs),
    /// Train a model and write its checkpoint and per-epoch metrics.
    Train(TrainArgs),
    /// Encode a corpus with a trained checkpoint and write an index directory.
    Index(IndexArgs),
    /// Answer queries against an index; one JSON line per query.
    Search(SearchArgs),
    /// Recall@k of an index on an eval file.
    Eval(EvalArgs),
    /// Viewer collapse diagnostics of a checkpoint on an eval file.
    Analyze(AnalyzeArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Directory receiving corpus.jsonl, train.jsonl and eval.jsonl.
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    segments_per_doc: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    topic_size: Option<usize>,
    #[arg(long)]
    segment_len: Option<usize>,
    #[arg(long)]
    query_len: Option<usize>,
    #[arg(long)]
    queries_per_segment: Option<usize>,
    #[arg(long)]
    eval_queries_per_segment: Option<usize>,
    #[arg(long)]
    noise_tokens: Option<usize>,
    #[arg(long)]
    hard_negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    hard_negatives: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Document views (viewer tokens) per document.
    #[arg(long)]
    n_viewers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long, value_enum)]
    view_mode: Option<CliViewMode>,
    /// Weight of the local viewer-uniformity loss.
    #[arg(long)]
    lambda: Option<f64>,
    /// Use this constant temperature instead of the annealed schedule.
    #[arg(long)]
    fixed_tau: Option<f64>,
    /// Continue from the checkpoint if it exists.
    #[arg(long)]
    resume: bool,
    /// Print the merged configuration as TOML and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum CliViewMode {
    Viewers,
    FirstK,
}

impl From<CliViewMode> for ViewMode {
    fn from(m: CliViewMode) -> Self {
        match m {
            CliViewMode::Viewers => ViewMode::Viewers,
            CliViewMode::FirstK => ViewMode::FirstK,
        }
    }
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    index: Option<PathBuf>,
    /// `ann` also builds the search graph.
    #[arg(long, value_enum)]
    mode: Option<IndexMode>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    ef_construction: Option<usize>,
    #[arg(long)]
    ef_search: Option<usize>,
}

#[derive(Debug, Args)]
struct QueryModeArgs {
    #[arg(long)]
    index: Option<PathBuf>,
    /// Checkpoint whose query encoder embeds the queries.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<IndexMode>,
    /// Graph search beam width.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    ef: Option<u64>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    #[command(flatten)]
    target: QueryModeArgs,
    /// Query text; repeatable.
    #[arg(long = "query")]
    queries: Vec<String>,
    /// File with one query per line.
    #[arg(long)]
    queries_file: Option<PathBuf>,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,
    /// Write results here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    target: QueryModeArgs,
    #[arg(long)]
    eval: Option<PathBuf>,
    /// Comma-separated cutoffs, e.g. 5,20,100.
    #[arg(long, value_delimiter = ',', value_parser = clap::value_parser!(u64).range(1..))]
    ks: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, value_enum)]
    normalization: Option<CliNormalization>,
    /// Also write the best-viewer histogram as CSV.
    #[arg(long)]
    histogram_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum CliNormalization {
    Softmax,
    Raw,
    MinMax,
}

impl From<CliNormalization> for ScoreNormalization {
    fn from(n: CliNormalization) -> Self {
        match n {
            CliNormalization::Softmax => ScoreNormalization::Softmax,
            CliNormalization::Raw => ScoreNormalization::Raw,
            CliNormalization::MinMax => ScoreNormalization::MinMax,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("MVR_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return fail("usage", first, None);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, line) = classify(&e);
            let message = format!("{e:#}").replace('\n', " ");
            fail(kind, &message, line)
        }
    }
}

/// Writes the one-line JSON error record to stderr.
fn fail(kind: &str, message: &str, line: Option<usize>) -> ExitCode {
    let mut record = json!({ "error": kind, "message": message });
    if let Some(line) = line {
        record["line"] = json!(line);
    }
    eprintln!("{record}");
    ExitCode::from(if kind == "usage" { 2 } else { 1 })
}

fn classify(e: &anyhow::Error) -> (&'static str, Option<usize>) {
    if e.chain().any(|c| c.is::<UsageError>()) {
        return ("usage", None);
    }
    if e.chain().any(|c| c.is::<MissingFile>()) {
        return ("missing_file", None);
    }
    if e.chain().any(|c| c.is::<toml::de::Error>()) {
        return ("config", None);
    }
    let Some(err) = e.chain().find_map(|c| c.downcast_ref::<MvrError>()) else {
        return ("error", None);
    };
    match err {
        MvrError::Config(_) => ("config", None),
        MvrError::InvalidInput(_) => ("invalid_input", None),
        MvrError::DimensionMismatch { .. } => ("dimension_mismatch", None),
        MvrError::Parse { line, .. } => ("malformed_record", Some(*line)),
        MvrError::Version { .. } => ("version", None),
        MvrError::Corrupt { .. } => ("corrupt", None),
        MvrError::NonFiniteLoss { .. } => ("non_finite_loss", None),
        MvrError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ("missing_file", None),
        MvrError::Io { .. } => ("io", None),
        MvrError::Json(_) => ("json", None),
    }
}
