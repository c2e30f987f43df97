use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "dejavu",
    version,
    about = "Contextual-sparsity transformer inference toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a random (or planted-cluster) weight file.
    GenModel(GenModelArgs),
    /// Record oracle sparsity on random prompts.
    Record(RecordArgs),
    /// Train per-layer head and neuron predictors from records.
    TrainPredictor(TrainArgs),
    /// Generate tokens in dense, sparse-sequential or lookahead mode.
    Run(RunArgs),
    /// Dense vs fused sparse MLP latency and IO sweep.
    Bench(BenchArgs),
    /// Hyperplane-LSH MaxIP success and latency on a planted dataset.
    Nns(NnsArgs),
    /// Sketch and norm-preservation checks.
    SketchCheck(SketchArgs),
    /// Depth-transform deviation report and oracle check.
    Depth(DepthArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub d_model: usize,
    #[arg(long, default_value_t = 8)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 256)]
    pub vocab: usize,
    #[arg(long, default_value_t = 128)]
    pub max_seq: usize,
    /// Clustered weights whose active neurons follow the token's cluster.
    #[arg(long)]
    pub planted: bool,
}

#[derive(Debug, Args)]
pub struct RecordArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Output directory for `record_NNN.djvs` files and reports.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub prompts: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    /// Neuron activation-magnitude threshold for the recorded MLP sets.
    #[arg(long, default_value_t = 1e-9)]
    pub threshold: f64,
    /// Heads kept per step by output norm; all heads when omitted.
    #[arg(long)]
    pub topk_heads: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SourceArg {
    Sequential,
    Lookahead,
    Concurrent,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of `.djvs` record files.
    #[arg(long)]
    pub records: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Neuron label threshold on activation magnitude.
    #[arg(long, default_value_t = 1e-9)]
    pub threshold: f64,
    /// Head label threshold on output norm.
    #[arg(long, default_value_t = 0.1)]
    pub head_threshold: f64,
    /// Budgets used for the logged recall.
    #[arg(long)]
    pub topk_heads: Option<usize>,
    #[arg(long)]
    pub topk_neurons: Option<usize>,
    #[arg(long, value_enum, default_value_t = SourceArg::Sequential)]
    pub source: SourceArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Dense,
    #[value(name = "sparse-seq")]
    SparseSeq,
    Lookahead,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Directory of `.djvp` predictor files; full budgets when omitted.
    #[arg(long)]
    pub predictors: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Dense)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
    #[arg(long)]
    pub topk_heads: Option<usize>,
    #[arg(long)]
    pub topk_neurons: Option<usize>,
    /// Neuron score threshold instead of a TopK neuron budget.
    #[arg(long, conflicts_with = "topk_neurons")]
    pub threshold: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// Keep wall-clock fields in the trace CSV.
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.05, 0.1, 0.25, 0.5, 0.8, 1.0])]
    pub density: Vec<f64>,
    /// Timed runs per scenario.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 1024)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4096)]
    pub d_ff: usize,
}

#[derive(Debug, Args)]
pub struct NnsArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    /// Number of queries.
    #[arg(long, default_value_t = 1200)]
    pub trials: usize,
    #[arg(long, default_value_t = 20)]
    pub tables: usize,
    #[arg(long, default_value_t = 10)]
    pub bits: usize,
    #[arg(long, default_value_t = 300)]
    pub probes: usize,
    #[arg(long, default_value_t = 0.9)]
    pub c: f64,
    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,
    #[arg(long, default_value_t = 0.9)]
    pub min_success: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SketchCheckKind {
    Gaussian,
    Ams,
    Countsketch,
    Sparse,
    Sampling,
    Srht,
    Relu,
    SoftmaxL1,
    SoftmaxL2,
    ResidualMlp,
    ResidualAttention,
    Chi2,
}

#[derive(Debug, Args)]
pub struct SketchArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = vec![SketchCheckKind::Gaussian])]
    pub kind: Vec<SketchCheckKind>,
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `parallel2`, `parallel4` or `skipN`.
    #[arg(long, default_value = "parallel2")]
    pub transform: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub steps: usize,
    #[arg(long, default_value_t = 16)]
    pub prompt_len: usize,
}
