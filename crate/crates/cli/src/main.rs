//! `cuegen`: the batch pipeline, one subcommand per stage.
//!
//! parse → split → train-tokenizer → train-lm → train-attr → lda →
//! generate → eval → serve
//!
//! Exit status is 0 on success, 1 on a domain error and 2 on a usage error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "cuegen", version, about = "Cue generation for play scripts")]
pub struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON file with optional "model", "train", "head", "lda" and
    /// "steering" sections; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse raw scripts into the JSONL corpus.
    Parse {
        #[arg(long = "in", required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write per-script cue statistics.
        #[arg(long)]
        stats_out: Option<PathBuf>,
    },
    /// Split a corpus by script into train / attribute / test files.
    Split {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Comma-separated train,attribute,test fractions.
        #[arg(long, default_value = "0.8,0.1,0.1")]
        fractions: String,
    },
    /// Build the word vocabulary from a corpus.
    TrainTokenizer {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        max_vocab: usize,
    },
    /// Train the language model.
    TrainLm(TrainLmArgs),
    /// Train an attribute head on the frozen language model.
    TrainAttr(TrainAttrArgs),
    /// Fit an LDA topic model over corpus lines.
    Lda(LdaArgs),
    /// Generate steered candidates for a prefix.
    Generate(GenerateArgs),
    /// Score generators against reference cues.
    Eval(EvalArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct TrainLmArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub clip: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadKind {
    /// Cue vs dialogue, labels from a corpus JSONL.
    Cue,
    /// Multi-label emotions from `{"text", "emojis"}` JSONL.
    Emotion,
}

#[derive(Debug, Args)]
pub struct TrainAttrArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = HeadKind::Cue)]
    pub kind: HeadKind,
    /// `emoji<TAB>label` file; defaults to the bundled Plutchik map.
    #[arg(long)]
    pub emotion_map: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub holdout: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LdaDocs {
    Cues,
    Dialogue,
    All,
}

#[derive(Debug, Args)]
pub struct LdaArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Which lines become documents.
    #[arg(long, value_enum, default_value_t = LdaDocs::Cues)]
    pub docs: LdaDocs,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Keywords per topic to report and write.
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    /// Write one `topic_<k>.txt` keyword list per topic here.
    #[arg(long)]
    pub bow_dir: Option<PathBuf>,
}

/// Every steering parameter; unset flags fall back to the config file and
/// then to the defaults (α=0.04, γ=1, λ_KL=0.01, γ_gm=0.95, m=1).
#[derive(Debug, Clone, Default, Args)]
pub struct SteeringFlags {
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub kl_scale: Option<f64>,
    #[arg(long)]
    pub gm_scale: Option<f64>,
    #[arg(long)]
    pub num_iterations: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct AttributeFlags {
    /// cue | dialogue | topic:<k> | emotion:<label>
    #[arg(long, default_value = "cue")]
    pub attribute: String,
    /// Cue/dialogue head.
    #[arg(long)]
    pub head: Option<PathBuf>,
    #[arg(long)]
    pub emotion_head: Option<PathBuf>,
    #[arg(long)]
    pub lda: Option<PathBuf>,
    /// Manual keyword list (one word per line) for `topic:<k>`, used
    /// instead of the LDA model.
    #[arg(long)]
    pub bow_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub lm: PathBuf,
    #[arg(long)]
    pub prefix: String,
    #[command(flatten)]
    pub attr: AttributeFlags,
    #[command(flatten)]
    pub steering: SteeringFlags,
    #[arg(long, default_value_t = 1)]
    pub num_candidates: usize,
    /// Also sample the same seeds unsteered and score them.
    #[arg(long)]
    pub compare: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum GeneratorId {
    /// Steered toward the attribute.
    Steered,
    /// The plain language model.
    Unsteered,
    /// Reference cues echoed verbatim (a ceiling check).
    Echo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DistNormArg {
    Ngrams,
    Tokens,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One or more generators; each becomes a table row.
    #[arg(long, value_enum, required = true, num_args = 1..)]
    pub generator: Vec<GeneratorId>,
    /// Corpus JSONL whose cue lines are the references.
    #[arg(long)]
    pub references: PathBuf,
    /// Corpus JSONL whose dialogue lines prompt the generators; defaults
    /// to the reference file.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[arg(long)]
    pub lm: Option<PathBuf>,
    #[command(flatten)]
    pub attr: AttributeFlags,
    #[command(flatten)]
    pub steering: SteeringFlags,
    #[arg(long, default_value_t = 600)]
    pub num_samples: usize,
    #[arg(long, default_value_t = 50_000)]
    pub reference_size: usize,
    #[arg(long, default_value_t = 10)]
    pub top_r: usize,
    #[arg(long, value_enum, default_value_t = DistNormArg::Ngrams)]
    pub dist_norm: DistNormArg,
    /// Write the full reports (with per-sample neighbours) here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = "CUEGEN_HOST", default_value = "127.0.0.1")]
    pub host: String,
    #[arg(long, env = "CUEGEN_PORT", default_value_t = 8080)]
    pub port: u16,
    #[arg(long, env = "CUEGEN_STORE", default_value = "cuegen-store")]
    pub store: PathBuf,
    #[arg(long, env = "CUEGEN_CHECKPOINT")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, env = "CUEGEN_HEAD")]
    pub head: Option<PathBuf>,
    #[arg(long, env = "CUEGEN_EMOTION_HEAD")]
    pub emotion_head: Option<PathBuf>,
    #[arg(long, env = "CUEGEN_LDA")]
    pub lda: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // clap exits with status 2 on usage errors and 0 for --help/--version
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if cli.json {
                eprintln!("{}", serde_json::json!({ "error": commands::error_name(&e), "detail": format!("{e:#}") }));
            } else {
                eprintln!("error: {e:#}");
            }
            ExitCode::from(1)
        }
    }
}
