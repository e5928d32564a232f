//! The `pixelrep` command line.

pub mod commands;
pub mod config;
pub mod manifest;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::ExperimentConfig;

/// Every flag can also be set through a `PIXELREP_`-prefixed environment
/// variable, e.g. `PIXELREP_SEED=3`.
#[derive(Debug, Parser)]
#[command(name = "pixelrep", version, about = "Pixel and subword translation experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Global {
    /// Seed for every stochastic component; overrides the config seed.
    #[arg(long, global = true, env = "PIXELREP_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "PIXELREP_OUT")]
    pub out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true, env = "PIXELREP_THREADS")]
    pub threads: Option<usize>,
}

impl Global {
    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render text lines into a binary image cache.
    Render(RenderArgs),
    /// Train, unite, or expand subword vocabularies.
    #[command(subcommand)]
    Vocab(VocabCmd),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Adapt a checkpoint to a new language.
    Finetune(FinetuneArgs),
    /// Translate source lines with a checkpoint.
    Translate(TranslateArgs),
    /// Score hypotheses, or a checkpoint on a corpus.
    Evaluate(EvaluateArgs),
    /// Representation analyses.
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    /// Print the parameter count of a config.
    Params(ParamsArgs),
    /// Generate a synthetic parallel corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// One sentence per line.
    #[arg(long = "in")]
    pub input: Option<PathBuf>,
    /// Render this text instead of a file.
    #[arg(long, conflicts_with = "input")]
    pub text: Option<String>,
    /// Font files in fallback order; bundled fonts when omitted.
    #[arg(long, value_delimiter = ',')]
    pub font: Vec<PathBuf>,
    /// Canvas height in pixels.
    #[arg(long, default_value_t = 32)]
    pub height: u32,
    /// Also write the first image as a PGM file.
    #[arg(long)]
    pub pgm: bool,
}

#[derive(Debug, Subcommand)]
pub enum VocabCmd {
    /// Learn a segmenter from text.
    Train {
        /// Plain text, or a corpus TSV with --column.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        column: Option<Column>,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Union of per-language vocabularies given as lang=path.
    Union {
        #[arg(long = "model", required = true)]
        models: Vec<String>,
        #[arg(long)]
        output: PathBuf,
    },
    /// One temperature-weighted vocabulary over every language of a corpus.
    Joint {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "source")]
        column: Column,
        #[arg(long)]
        per_lang: usize,
        #[arg(long, default_value_t = 5.0)]
        temperature: f64,
        #[arg(long)]
        output: PathBuf,
    },
    /// Append a new language's tokens to a base vocabulary.
    Expand {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        addition: PathBuf,
        #[arg(long)]
        lang: String,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum Column {
    Source,
    Target,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Directory with train.tsv and valid.tsv; overrides data.dir.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Directory with train.tsv and valid.tsv of the new language.
    #[arg(long)]
    pub data: PathBuf,
    /// direct, or expand to grow the source vocabulary first (subword only).
    #[arg(long, default_value = "direct")]
    pub mode: String,
    /// Subsample the new language's training set to this many pairs.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Experiment config whose `train` section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TranslateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
    /// Language tag selecting a per-language segmenter.
    #[arg(long, default_value = "")]
    pub lang: String,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_delimiter = ',', default_value = "bleu,chrf")]
    pub metric: Vec<String>,
    #[arg(long, requires = "reference")]
    pub hyp: Option<PathBuf>,
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// Evaluate a checkpoint on a corpus TSV instead.
    #[arg(long, requires = "data", conflicts_with = "hyp")]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub beam: usize,
    #[arg(long, default_value_t = 64)]
    pub max_len: usize,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCmd {
    /// 2-D SVD of source embeddings with frequency ranks.
    Svd {
        #[arg(long)]
        ckpt: PathBuf,
        /// Subword vocabulary whose pieces are rendered (pixel checkpoints).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Corpus TSV for frequency ranks.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 100.0)]
        keep: f64,
    },
    /// Character n-gram coverage of a new corpus by a pretraining corpus.
    Coverage {
        #[arg(long)]
        pretrain: PathBuf,
        #[arg(long)]
        new: PathBuf,
        #[arg(long)]
        token_weighted: bool,
    },
    /// Share of source-embedder parameters with a nonzero gradient.
    Updates {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 10)]
        batches: usize,
        #[arg(long, default_value_t = 1000)]
        batch_tokens: usize,
    },
    /// Cosine of mean-pooled conv activations of two words.
    Similarity {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
    },
    /// Mean-pooled sentence vectors as TSV.
    ReprExport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// ted7-pixel, ted7-bpe, ted59-pixel or ted59-bpe.
    #[arg(long)]
    pub preset: Option<String>,
    /// Write the preset as a full experiment config to this path.
    #[arg(long, requires = "preset")]
    pub emit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_delimiter = ',', default_value = "latin,cyrillic")]
    pub scripts: Vec<String>,
    /// Examples per language.
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// copy, transliterate or number-words.
    #[arg(long, default_value = "transliterate")]
    pub task: String,
    /// Share of each language held out for validation and for test.
    #[arg(long, default_value_t = 0.1)]
    pub holdout: f64,
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let g = &cli.global;
    match cli.command {
        Command::Render(a) => commands::render(g, a),
        Command::Vocab(c) => commands::vocab(g, c),
        Command::Train(a) => commands::train(g, a),
        Command::Finetune(a) => commands::finetune(g, a),
        Command::Translate(a) => commands::translate(g, a),
        Command::Evaluate(a) => commands::evaluate(g, a),
        Command::Analyze(c) => commands::analyze(g, c),
        Command::Params(a) => commands::params(a),
        Command::Synth(a) => commands::synth(g, a),
    }
}
