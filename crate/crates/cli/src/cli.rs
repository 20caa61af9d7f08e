use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Multimodal depression screening: training, evaluation and triage service.
///
/// Every subcommand accepts `--config FILE`, a TOML file whose values take
/// precedence over the corresponding flags. Errors are printed to stderr as
/// one JSON line; the exit code is 1 for user errors and 2 for internal ones.
#[derive(Debug, Parser)]
#[command(name = "depscreen", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded synthetic dataset directory.
    Synth(SynthArgs),
    /// Pretrain both modality encoders and write a bundle with an untrained
    /// fusion network.
    Pretrain(TrainArgs),
    /// Train the full model: pretraining (unless --bundle is given) then
    /// fusion training.
    Train(TrainArgs),
    /// Evaluate a bundle and corpus on the held-out split.
    Eval(EvalArgs),
    /// Classify one session manifest.
    Classify(ClassifyArgs),
    /// Create, inspect or extend a reference corpus.
    Corpus(CorpusArgs),
    /// Run the HTTP triage service.
    Serve(ServeArgs),
    /// Write the held-out ROC table (`threshold,fpr,tpr` and an AUC line).
    RocExport(EvalArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML file overriding flags.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory (created; must be empty or absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator seed (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of sessions.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth` or laid out the same way.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Training seed (required).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epochs for each training stage.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Contrastive margin, in (0, 2].
    #[arg(long)]
    pub margin: Option<f64>,
    /// Starting bundle; `train` then only runs fusion training.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Corpus log.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Class boundary: abstain below this similarity.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Output file (JSON report for `eval`, ROC table for `roc-export`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    /// Session manifest (JSON).
    pub manifest: PathBuf,
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[command(subcommand)]
    pub action: CorpusAction,
}

#[derive(Debug, Subcommand)]
pub enum CorpusAction {
    /// Pick exemplars nearest each class centroid of the training split and
    /// write a new corpus log.
    Seed {
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Output corpus log (must not exist).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Exemplars per class.
        #[arg(long, default_value_t = 5)]
        per_class: usize,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Print the corpus version and exemplars.
    List {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Append one session as a clinician-confirmed exemplar.
    Add {
        /// Session manifest (JSON).
        manifest: PathBuf,
        /// Confirmed label, 0..=3.
        #[arg(long)]
        label: u8,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Service data directory (logs, uploads, published bundles).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub bind: Option<SocketAddr>,
    /// Access token as ROLE:NAME:SECRET, ROLE being `user` or `clinician`.
    /// Repeatable.
    #[arg(long)]
    pub token: Vec<String>,
    /// Bundle served until a retrain publishes a newer one.
    #[arg(long)]
    pub bundle: Option<PathBuf>,
    /// Corpus log imported on first start.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub config: ConfigArg,
}
