use std::path::PathBuf;

use clap::{value_parser, Args, Parser, Subcommand, ValueEnum};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  a workflow failed (the diagnostic is printed on stderr)
  2  usage error: unknown subcommand or flag, missing required flag
  3  an input file does not exist
  4  invalid parameter value";

#[derive(Debug, Parser)]
#[command(
    name = "embeval",
    version,
    about = "Evaluate, diagnose and adapt dense text embeddings",
    after_help = EXIT_CODES,
    args_override_self = true,
    subcommand_required = true,
    arg_required_else_help = true
)]
pub(crate) struct Cli {
    #[command(subcommand)]
    pub workflow: Workflow,

    /// Directory receiving report files (created if missing).
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    pub out: PathBuf,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads. Defaults to $EMBEVAL_WORKERS, then one per core.
    #[arg(long, global = true, value_parser = value_parser!(u64).range(1..))]
    pub workers: Option<u64>,

    /// File of key=value lines used as flag defaults; flags given on the
    /// command line take precedence.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Workflow {
    /// Exact cosine top-k search; writes run.tsv.
    Search(SearchArgs),
    /// Recall@k of exact search against relevance judgments; writes run.tsv and recall.tsv.
    EvalRetrieval(EvalRetrievalArgs),
    /// NDCG of embedding re-ranking over logged listings (ndcg.tsv), and/or a
    /// paired t-test between two per-query reports (compare.tsv).
    EvalRanking(EvalRankingArgs),
    /// Alignment and uniformity of query/clicked-document pairs; writes diagnose.tsv.
    Diagnose(DiagnoseArgs),
    /// Train a linear projection head on triplets; writes head.emb and train.tsv.
    TrainHead(TrainHeadArgs),
    /// Threshold filtering of translation-scored sentences or triplets; writes
    /// filter.tsv and kept.tsv.
    FilterNli(FilterNliArgs),
}

#[derive(Debug, Clone, Args)]
pub struct SearchArgs {
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = value_parser!(u64).range(1..))]
    pub k: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalRetrievalArgs {
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub corpus: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = 100, value_parser = value_parser!(u64).range(1..))]
    pub k: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalRankingArgs {
    /// Listing query embeddings, keyed by listing id.
    #[arg(long, value_name = "FILE", requires_all = ["docs", "listings"])]
    pub queries: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires_all = ["queries", "listings"])]
    pub docs: Option<PathBuf>,
    #[arg(long, value_name = "FILE", requires_all = ["queries", "docs"])]
    pub listings: Option<PathBuf>,
    /// Score only the first N re-ranked positions.
    #[arg(long, value_name = "N", value_parser = value_parser!(u64).range(1..))]
    pub truncate: Option<u64>,
    /// Two per-query report files to compare with a paired t-test.
    #[arg(long, num_args = 2, value_names = ["RUN_A", "RUN_B"])]
    pub compare: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub docs: PathBuf,
    /// Query/clicked-document pairs; every positive-gain row is a pair.
    #[arg(long, value_name = "FILE")]
    pub qrels: PathBuf,
    #[arg(long, default_value_t = 2.0, value_parser = positive, allow_negative_numbers = true)]
    pub alpha: f64,
    #[arg(long, default_value_t = 2.0, value_parser = positive, allow_negative_numbers = true)]
    pub t: f64,
    #[arg(long, default_value_t = 1024, value_parser = value_parser!(u64).range(2..))]
    pub batch_size: u64,
    /// Row label in the report.
    #[arg(long, default_value = "model")]
    pub label: String,
    /// Also report Recall@K of exact search over --docs.
    #[arg(long, value_name = "K", value_parser = value_parser!(u64).range(1..))]
    pub recall_k: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainHeadArgs {
    #[arg(long, value_name = "FILE")]
    pub triplets: PathBuf,
    /// Embeddings for every sentence id named in --triplets.
    #[arg(long, value_name = "FILE")]
    pub embeddings: PathBuf,
    #[arg(long, default_value_t = 0.05, value_parser = positive, allow_negative_numbers = true)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.05, value_parser = positive, allow_negative_numbers = true)]
    pub lr: f64,
    #[arg(long, default_value_t = 1)]
    pub epochs: u64,
    #[arg(long, default_value_t = 64, value_parser = value_parser!(u64).range(2..))]
    pub batch_size: u64,
    /// Drop the hard-negative column from the loss.
    #[arg(long)]
    pub no_hard_negatives: bool,
    /// Output width of the head; defaults to the input width.
    #[arg(long, value_parser = value_parser!(u64).range(1..))]
    pub d_out: Option<u64>,
    #[arg(long)]
    pub bias: bool,
    /// Embedding files to pass through the trained head; each is written as
    /// <stem>.projected.emb.
    #[arg(long, value_name = "FILE", num_args = 1..)]
    pub project: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregateArg {
    /// Score ids are the filtered items themselves.
    None,
    /// A triplet scores as its weakest sentence.
    Min,
    Mean,
}

#[derive(Debug, Clone, Args)]
pub struct FilterNliArgs {
    /// sentence_id<TAB>system<TAB>score rows; the best system per sentence is kept.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[arg(long, default_value_t = 0.05, value_parser = finite, allow_negative_numbers = true)]
    pub threshold: f64,
    #[arg(long, value_name = "FILE")]
    pub triplets: Option<PathBuf>,
    /// How sentence scores combine into a triplet score. Defaults to min
    /// with --triplets and none without.
    #[arg(long, value_enum)]
    pub aggregate: Option<AggregateArg>,
}

fn positive(s: &str) -> Result<f64, String> {
    let v = finite(s)?;
    if v > 0.0 {
        Ok(v)
    } else {
        Err(format!("{v} is not positive"))
    }
}

fn finite(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("{e}"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} is not finite"))
    }
}
