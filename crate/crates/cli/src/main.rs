//! `backdep`: train, evaluate and analyse bi-directional-tail decoders.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "backdep", version, about)]
struct Cli {
    /// Directory for every file a command writes [default: the config's
    /// `out_dir`, else `out`].
    #[arg(long, global = true, env = "BACKDEP_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a triplet file; writes a checkpoint and loss.csv.
    Train(TrainArgs),
    /// Spearman correlation between predicted similarities and gold scores.
    EvalSts(EvalStsArgs),
    /// Score the model after dropping top layers one at a time.
    Degrade(DegradeArgs),
    /// Pivot-token dependency under the checkpoint's plan and all-causal.
    AnalyzeDep(AnalyzeDepArgs),
    /// Alignment and uniformity of embedding matrices.
    Anisotropy(AnisotropyArgs),
    /// Caption retrieval with strict accuracy.
    Retrieve(RetrieveArgs),
    /// Logistic-regression probe on embedding features.
    Probe(ProbeArgs),
    /// Write synthetic datasets.
    GenData(GenDataArgs),
    /// Train the modification and addition strategies and compare them.
    Ablate(AblateArgs),
    /// Write sentence embeddings as a tab-separated matrix.
    Embed(EmbedArgs),
}

/// Overrides applied on top of the run configuration.
#[derive(Args, Clone, Default)]
struct TrainOverrides {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    /// Allow batch sizes outside 16/32/64/128.
    #[arg(long)]
    any_batch_size: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Triplet file; falls back to `data.triplets` in the config.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Number of layers that stay causal; omit to apply the configured strategy.
    #[arg(long)]
    turning_point: Option<usize>,
    /// modification or addition.
    #[arg(long)]
    strategy: Option<String>,
    /// Wrap the model in low-rank adapters of this rank.
    #[arg(long)]
    lora_rank: Option<usize>,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Checkpoint path; defaults to `<out-dir>/model.ckpt`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct EvalStsArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, required_unless_present = "predictions")]
    checkpoint: Option<PathBuf>,
    /// One predicted score per line; replaces model predictions.
    #[arg(long, conflicts_with = "checkpoint")]
    predictions: Option<PathBuf>,
}

#[derive(Args)]
struct DegradeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pair files forming the evaluation suite.
    #[arg(long, required = true, num_args = 1..)]
    pairs: Vec<PathBuf>,
    /// Fine-tune every truncation on these triplets before scoring.
    #[arg(long)]
    retrain: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct AnalyzeDepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sentences: PathBuf,
    /// last or first.
    #[arg(long, default_value = "last")]
    pivot: String,
}

#[derive(Args)]
struct AnisotropyArgs {
    /// Embeddings sampled from the data distribution.
    #[arg(long)]
    data: PathBuf,
    /// First members of the positive pairs.
    #[arg(long)]
    left: PathBuf,
    /// Second members, row-aligned with `--left`.
    #[arg(long)]
    right: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    train_embeddings: PathBuf,
    #[arg(long)]
    train_labels: PathBuf,
    #[arg(long)]
    test_embeddings: PathBuf,
    #[arg(long)]
    test_labels: PathBuf,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    triplets: usize,
    #[arg(long, default_value_t = 500)]
    pairs: usize,
    /// Number of sentence pairs, each written with two conditions.
    #[arg(long, default_value_t = 100)]
    conditional: usize,
    #[arg(long, default_value_t = 200)]
    sentences: usize,
    #[arg(long, default_value_t = 12)]
    groups: usize,
    #[arg(long, default_value_t = 5)]
    captions: usize,
    /// Give every slot value three unrelated surface forms.
    #[arg(long)]
    synonyms: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Training triplets; synthetic data is generated when omitted.
    #[arg(long)]
    triplets: Option<PathBuf>,
    /// Evaluation pairs; synthetic data is generated when omitted.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    sentences: PathBuf,
    /// Matrix path; defaults to `<out-dir>/embeddings.tsv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let message = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {message}", e.kind());
            ExitCode::FAILURE
        }
    }
}
