//! `stylemix` command-line entry point.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "stylemix", version, about = "One-to-many text style transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CorpusArgs {
    /// Sentences of style one, one per line.
    #[arg(long)]
    pub corpus1: PathBuf,
    /// Sentences of style two, one per line.
    #[arg(long)]
    pub corpus2: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Builds the shared vocabulary of two corpora.
    BuildVocab {
        #[command(flatten)]
        corpora: CorpusArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        min_count: usize,
    },
    /// Trains a model; everything lands in a run directory named by the config hash.
    Train(TrainArgs),
    /// Transfers sentences into the other style, several variants each.
    Transfer(TransferArgs),
    /// Scores a transfer output file.
    Eval(EvalArgs),
    /// Trains the word vectors used by the content score and retrieval sampling.
    TrainEmbeddings(EmbeddingArgs),
    /// Trains the style classifier used by the style score.
    TrainClassifier(ClassifierArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Flat `key = value` file; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Any setting as `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Turns off a loss term (rec, back, mse, cls, adv); may repeat.
    #[arg(long = "disable-loss", value_name = "TERM")]
    pub disable_loss: Vec<String>,
    #[arg(long)]
    pub corpus1: Option<PathBuf>,
    #[arg(long)]
    pub corpus2: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub dim: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Sentences to transfer, one per line.
    #[arg(long)]
    pub input: PathBuf,
    /// Style of the input sentences: 1 or 2.
    #[arg(long)]
    pub source: String,
    /// Corpus of the target style; style codes are drawn from it.
    #[arg(long)]
    pub target_corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub variants: usize,
    /// uniform or retrieval.
    #[arg(long, default_value = "uniform")]
    pub scheme: String,
    #[arg(long, default_value_t = 100)]
    pub pool_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// greedy or beam.
    #[arg(long, default_value = "greedy")]
    pub decode: String,
    #[arg(long, default_value_t = 4)]
    pub beam_width: usize,
    #[arg(long, default_value_t = 25)]
    pub max_len: usize,
    /// Word vectors; required by the retrieval scheme.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Transfer output file.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Style the predictions were transferred into: 1 or 2.
    #[arg(long)]
    pub target: String,
    #[command(flatten)]
    pub corpora: CorpusArgs,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub classifier: Option<PathBuf>,
    /// Trains whichever of the embeddings and classifier is missing.
    #[arg(long)]
    pub train_missing: bool,
    /// Vocabulary for an in-line classifier; built from the corpora if absent.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long, default_value_t = 5.0)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EmbeddingArgs {
    #[command(flatten)]
    pub corpora: CorpusArgs,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 2)]
    pub window: usize,
    #[arg(long, default_value_t = 5)]
    pub negatives: usize,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.025)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ClassifierArgs {
    #[command(flatten)]
    pub corpora: CorpusArgs,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub max_len: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildVocab {
            corpora,
            out,
            min_count,
        } => commands::build_vocab(&corpora, &out, min_count),
        Command::Train(a) => commands::train(&a),
        Command::Transfer(a) => commands::transfer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::TrainEmbeddings(a) => commands::train_embeddings(&a),
        Command::TrainClassifier(a) => commands::train_classifier(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
