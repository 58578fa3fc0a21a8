//! The `engine` command: training, evaluation, tokenization and chat over the
//! deskformer core library.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, CommandFactory, Parser, Subcommand};

/// Bad invocation: exit code 1.
#[derive(Debug, Clone)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "engine", version, about = "Desk-scale decoder-only transformer engine")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON engine config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.peak_lr=1e-3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ExtensionArgs {
    /// NTK-aware RoPE scaling: off, static:S, dynamic or dynamic:CHUNK.
    #[arg(long)]
    pub ntk: Option<String>,
    /// Enable LogN attention scaling.
    #[arg(long)]
    pub logn: bool,
    /// Per-layer windows `w0,w1,...` or `auto:MIN:MAX`.
    #[arg(long)]
    pub windows: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain (or fine-tune on chat data) and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Total optimizer steps (overrides train.total_steps).
        #[arg(long)]
        steps: Option<usize>,
        /// Plain-text corpus; documents separated by <|endoftext|>.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Chat data as JSON lines; switches to masked fine-tuning.
        #[arg(long)]
        sft: Option<PathBuf>,
        /// Rank file; trained from the corpus and written here if missing.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Start from this checkpoint instead of random weights.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-step CSV metrics file (default: stdout).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Also write the checkpoint every K steps.
        #[arg(long, value_name = "K")]
        checkpoint_every: Option<usize>,
    },
    /// Perplexity at several lengths for several technique sets.
    EvalPpl {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Comma-separated evaluation lengths, ascending.
        #[arg(long, default_value = "256,512,1024", value_delimiter = ',')]
        lengths: Vec<usize>,
        /// Comma-separated technique sets such as off,ntk,ntk+logn,ntk+logn+window.
        #[arg(long, default_value = "off,ntk,ntk+logn,ntk+logn+window", value_delimiter = ',')]
        techniques: Vec<String>,
        /// Cap on sequences scored per length.
        #[arg(long)]
        max_sequences: Option<usize>,
        /// CSV output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Text table and bar chart output path.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Encode text and print token ids.
    Tokenize {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        text: String,
        /// Treat special-token text as special tokens.
        #[arg(long)]
        allow_specials: bool,
    },
    /// Learn a BPE rank file from a corpus.
    TrainVocab {
        #[arg(long)]
        corpus: PathBuf,
        /// Ordinary tokens in the result (at least 256).
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compression rate of one vocabulary against another, per labelled corpus.
    BenchCompression {
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        /// `LABEL=PATH`, repeatable.
        #[arg(long = "corpus", value_name = "LABEL=PATH", required = true)]
        corpora: Vec<String>,
    },
    /// Continue a prompt.
    Generate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Nucleus sampling mass; greedy when omitted.
        #[arg(long)]
        top_p: Option<f64>,
        /// Sampling seed (default: the config seed).
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        ext: ExtensionArgs,
    },
    /// Interactive chat on stdin/stdout.
    Chat {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// System prompt.
        #[arg(long)]
        system: Option<String>,
        #[arg(long, default_value_t = 256)]
        max_new: usize,
        #[arg(long)]
        top_p: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        ext: ExtensionArgs,
    },
    /// Print a checkpoint's config and tensor table.
    InspectCheckpoint {
        #[arg(long)]
        model: PathBuf,
    },
}

/// The clap command tree, for help reflection.
pub fn command() -> clap::Command {
    Cli::command()
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("ENGINE_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| UsageError(format!("ENGINE_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            anyhow::bail!(UsageError("ENGINE_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = configure_threads().and_then(|()| commands::dispatch(cli.command));
    match result {
        Ok(()) => 0,
        // A closed stdout (`engine ... | head`) ends the command quietly.
        Err(e)
            if e.chain().any(|c| {
                c.downcast_ref::<std::io::Error>()
                    .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            }) =>
        {
            0
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                1
            } else {
                2
            }
        }
    }
}
