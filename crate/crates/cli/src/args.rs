use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Evidence-weighted rewards, elections and adaptive runs over tagged traces.
///
/// Input and output are JSON lines on standard streams unless file flags are
/// given. Summaries go to stderr. Exit codes: 0 success, 1 usage or
/// configuration error, 2 data error.
#[derive(Debug, Parser)]
#[command(name = "evidence", version)]
pub struct Cli {
    /// TOML config file. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Seed for every randomized component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw outputs into candidate traces.
    Parse(ParseArgs),
    /// Score traces against ground-truth answers with the training reward.
    Reward(RewardArgs),
    /// Compute the inference-time evidence score of each trace.
    Score(ScoreArgs),
    /// Run the evidence-weighted election over one candidate pool.
    Elect(ElectArgs),
    /// Answer questions with adaptive sampling, early stopping and the referee.
    Run(RunArgs),
    /// Train a categorical toy policy with the group-relative objective.
    TrainToy(TrainToyArgs),
    /// Aggregate evidence metrics over run reports.
    Metrics(MetricsArgs),
    #[command(hide = true)]
    MockProvider(MockProviderArgs),
    #[command(hide = true)]
    MockReferee(MockRefereeArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// Input JSONL file (default: stdin).
    #[arg(long, short, value_name = "FILE")]
    pub input: Option<PathBuf>,
    /// Output file (default: stdout).
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParseOptions {
    /// Frame count for raw inputs that do not carry `total_frames`.
    #[arg(long)]
    pub total_frames: Option<u32>,
    /// Share of trailing tokens averaged into the confidence.
    #[arg(long)]
    pub tail_fraction: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoringOptions {
    #[arg(long)]
    pub clip_lo: Option<u32>,
    #[arg(long)]
    pub clip_hi: Option<u32>,
    /// N-gram order of the repetition ratio.
    #[arg(long)]
    pub ngram: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ParseArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub parse: ParseOptions,
}

#[derive(Debug, Args)]
pub struct RewardArgs {
    #[command(flatten)]
    pub io: InputArgs,
    /// Ground-truth answers, one per input line (plain text or JSON strings).
    #[arg(long, value_name = "FILE")]
    pub ground_truth: PathBuf,
    #[command(flatten)]
    pub parse: ParseOptions,
    #[command(flatten)]
    pub scoring: ScoringOptions,
    #[arg(long)]
    pub w_acc: Option<f64>,
    #[arg(long)]
    pub w_fmt: Option<f64>,
    #[arg(long)]
    pub w_fs: Option<f64>,
    #[arg(long)]
    pub w_tt: Option<f64>,
    #[arg(long)]
    pub w_ar: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub io: InputArgs,
    #[command(flatten)]
    pub parse: ParseOptions,
    #[command(flatten)]
    pub scoring: ScoringOptions,
}

#[derive(Debug, Args)]
pub struct ElectionOptions {
    /// Margin the winner must exceed to stop early.
    #[arg(long)]
    pub delta: Option<f64>,
    /// Mean confidence the winner must exceed to stop early.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Largest citation union searched exhaustively.
    #[arg(long)]
    pub exact_subset_limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ElectArgs {
    /// Candidates: traces, raw outputs, or `{"trace": .., "score": ..}` pairs.
    #[command(flatten)]
    pub io: InputArgs,
    /// Evidence scores, one per candidate, replacing computed ones.
    #[arg(long, value_name = "FILE")]
    pub scores: Option<PathBuf>,
    #[command(flatten)]
    pub parse: ParseOptions,
    #[command(flatten)]
    pub scoring: ScoringOptions,
    #[command(flatten)]
    pub election: ElectionOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProfileArg {
    Dominant,
    Contested,
    Untagged,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// `synthetic`, `replay:FILE` or `subprocess:CMD`.
    #[arg(long)]
    pub provider: Option<String>,
    /// Questions as JSONL `{"id", "total_frames", "prompt"}`. Replay files supply their own.
    #[arg(long, value_name = "FILE")]
    pub questions: Option<PathBuf>,
    /// Number of generated questions when no question file is given.
    #[arg(long, default_value_t = 1)]
    pub num_questions: usize,
    /// Candidate distribution of the synthetic provider.
    #[arg(long, value_enum, default_value_t = ProfileArg::Dominant)]
    pub profile: ProfileArg,
    /// External referee command; the heuristic referee is used otherwise.
    #[arg(long)]
    pub referee: Option<String>,
    #[arg(long)]
    pub k_max: Option<usize>,
    #[arg(long)]
    pub initial_k: Option<usize>,
    #[arg(long)]
    pub expand_step: Option<usize>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[command(flatten)]
    pub election: ElectionOptions,
    #[command(flatten)]
    pub parse: ParseOptions,
    #[command(flatten)]
    pub scoring: ScoringOptions,
    /// Report JSONL destination (default: stdout).
    #[arg(long, short, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    TwoAction,
    Templated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KlArg {
    Exact,
    Sampled,
}

#[derive(Debug, Args)]
pub struct TrainToyArgs {
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    #[arg(long)]
    pub group_size: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub eps_clip: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_enum)]
    pub kl: Option<KlArg>,
    #[arg(long, value_enum, default_value_t = TaskArg::TwoAction)]
    pub task: TaskArg,
    /// Reward curve CSV destination (default: stdout).
    #[arg(long, value_name = "FILE")]
    pub curve: Option<PathBuf>,
    /// Final policy JSON destination (default: summary on stderr only).
    #[arg(long, value_name = "FILE")]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Run reports JSONL.
    #[command(flatten)]
    pub io: InputArgs,
}

#[derive(Debug, Args)]
pub struct MockProviderArgs {
    #[arg(long, value_enum, default_value_t = ProfileArg::Dominant)]
    pub profile: ProfileArg,
    /// Reply `{"exhausted": true}` from this request index on.
    #[arg(long)]
    pub exhaust_after: Option<usize>,
    /// Answer with an error object for every request.
    #[arg(long)]
    pub fail: bool,
}

#[derive(Debug, Args)]
pub struct MockRefereeArgs {
    /// Number of frame gaps to report.
    #[arg(long, default_value_t = 0)]
    pub gaps: usize,
    /// Seconds to wait before answering.
    #[arg(long, default_value_t = 0.0)]
    pub sleep: f64,
    /// Print something that is not a critique.
    #[arg(long)]
    pub garbage: bool,
}
