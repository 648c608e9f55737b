//! Command line surface. Exit codes: 0 success, 2 configuration or usage
//! problem, 3 data problem, 4 numerical failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "mac",
    version,
    about = "Hierarchical attention model for evidence-aware claim verification"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Train with stratified cross-validation; writes reports, epoch logs,
    /// fold checkpoints, and a manifest into the output directory
    Train(TrainArgs),
    /// Score a corpus with a saved checkpoint and write an evaluation report
    Eval(EvalArgs),
    /// Compare attention and metadata ablations on one corpus
    Ablate(AblateArgs),
    /// Grid search over attention head counts
    Sweep(SweepArgs),
    /// Dump per-token and per-document attention weights for one claim
    Explain(ExplainArgs),
    /// Normalize a tab-separated corpus into the canonical JSONL layout
    Convert(ConvertArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    /// Corpus file in the canonical JSONL layout
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dataset schema: snopes or politifact
    #[arg(long)]
    pub schema: String,
    /// Flat `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base RNG seed (overrides the config file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Word attention head count (overrides the config file)
    #[arg(long)]
    pub h1: Option<usize>,
    /// Document attention head count (overrides the config file)
    #[arg(long)]
    pub h2: Option<usize>,
    /// Pre-trained word vectors, one `token v1 .. vD` line each
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint produced by the train command
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus file in the canonical JSONL layout
    #[arg(long)]
    pub corpus: PathBuf,
    /// Report file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct AblateArgs {
    /// Corpus file in the canonical JSONL layout
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dataset schema: snopes or politifact
    #[arg(long)]
    pub schema: String,
    /// Flat `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base RNG seed (overrides the config file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Word attention head count (overrides the config file)
    #[arg(long)]
    pub h1: Option<usize>,
    /// Document attention head count (overrides the config file)
    #[arg(long)]
    pub h2: Option<usize>,
    /// Comma-separated attention variants: full, word_only, evidence_only
    #[arg(long, default_value = "full,word_only,evidence_only")]
    pub mode: String,
    /// Comma-separated metadata variants: text, text+pub, text+spk,
    /// text+pub+spk (default: all channels the schema supports)
    #[arg(long)]
    pub features: Option<String>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct SweepArgs {
    /// Corpus file in the canonical JSONL layout
    #[arg(long)]
    pub corpus: PathBuf,
    /// Dataset schema: snopes or politifact
    #[arg(long)]
    pub schema: String,
    /// Flat `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base RNG seed (overrides the config file)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated word attention head counts, each in 1..=5
    #[arg(long)]
    pub h1_grid: String,
    /// Comma-separated document attention head counts, each in 1..=5
    #[arg(long)]
    pub h2_grid: String,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ExplainArgs {
    /// Checkpoint produced by the train command
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus file holding the claim to explain
    #[arg(long)]
    pub corpus: PathBuf,
    /// Claim id to explain
    #[arg(long)]
    pub claim_id: String,
    /// Explanation file to write
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Tab-separated source file (or an already-canonical JSONL file)
    #[arg(long)]
    pub tsv_in: PathBuf,
    /// Dataset schema: snopes or politifact
    #[arg(long)]
    pub schema: String,
    /// Canonical JSONL file to write
    #[arg(long)]
    pub jsonl_out: PathBuf,
}
