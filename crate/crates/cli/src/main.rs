mod commands;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(
    name = "memeguard",
    version,
    about = "Interpretation-augmented hateful meme detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load a dataset manifest into line-delimited records.
    Ingest {
        /// Manifest file; repeat to concatenate several splits.
        #[arg(long, required = true)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Print per-split label counts.
        #[arg(long)]
        stats: bool,
    },
    /// Generate an interpretation per meme through an LMM backend.
    Interpret(InterpretArgs),
    /// Encode memes and interpretations into an embedding matrix.
    Encode {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        interpretations: PathBuf,
        /// Output `.npy` file; the index is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Take the encoders from this checkpoint instead of the defaults.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train one model per configured seed.
    Train {
        /// TOML training config; missing keys take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        interpretations: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score trained runs on a test split.
    Eval {
        /// Run directory written by `train`; repeat for one row per run.
        #[arg(long = "run_dir", alias = "run-dir", required = true)]
        run_dir: Vec<PathBuf>,
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        interpretations: PathBuf,
        /// Where to write the machine-readable results (default: results.json
        /// in the first run directory).
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Word-level attribution for one meme's interpretation.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        meme: String,
        #[arg(long)]
        interpretations: PathBuf,
        #[arg(long)]
        records: PathBuf,
        /// Output path without extension; `.json` and `.html` are written.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        samples: usize,
        #[arg(long)]
        kernel_width: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Human evaluation study tooling.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Run the moderation service.
    Serve(ServeArgs),
    /// Write synthetic data.
    #[command(subcommand)]
    Synth(SynthCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    Mock,
    Http,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    backend: BackendKind,
    /// Inference server URL for the http backend.
    #[arg(long)]
    endpoint: Option<String>,
    /// Backend name recorded on interpretations (default: mock or http).
    #[arg(long)]
    backend_name: Option<String>,
    /// The backend has no system-instruction slot.
    #[arg(long)]
    no_system: bool,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct InterpretArgs {
    #[arg(long)]
    records: PathBuf,
    #[command(flatten)]
    backend: BackendArgs,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Concurrent backend calls.
    #[arg(long, default_value_t = 4)]
    in_flight: usize,
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Sample study items and export one score sheet per annotator.
    Build {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        interpretations: PathBuf,
        #[arg(long, default_value_t = 150)]
        items: usize,
        #[arg(long, default_value_t = 15)]
        controls: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "a1,a2,a3")]
        annotators: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate filled score sheets.
    Summarize {
        /// items.jsonl written by `study build`.
        #[arg(long)]
        items: PathBuf,
        #[arg(long, required = true, num_args = 1..)]
        sheets: Vec<PathBuf>,
        #[arg(long, default_value_t = memeguard_core::human_eval::DEFAULT_CONTROL_THRESHOLD)]
        control_threshold: f64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    cache: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    /// Event log directory.
    #[arg(long)]
    log: PathBuf,
    /// Uploaded images (default: <log>/blobs).
    #[arg(long)]
    blobs: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fifo")]
    ordering: OrderingArg,
    #[arg(long, default_value_t = 10)]
    lease_minutes: i64,
    /// Threads for inference and storage work.
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 30)]
    retry_secs: u64,
    /// Perturbation samples per explanation.
    #[arg(long, default_value_t = 500)]
    explain_samples: usize,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderingArg {
    Fifo,
    Priority,
}

#[derive(Clone, Copy, ValueEnum)]
enum SignalArg {
    Interpretation,
    Image,
}

#[derive(Subcommand)]
enum SynthCommand {
    /// A balanced corpus whose label lives in one modality.
    Corpus {
        #[arg(long, value_enum)]
        signal: SignalArg,
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// A small annotation file plus manifest with known label counts.
    Fixture {
        #[arg(long, default_value_t = 10)]
        records: usize,
        #[arg(long, default_value_t = 6)]
        hateful: usize,
        #[arg(long, default_value_t = 1)]
        missing: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest {
            manifest,
            out,
            stats,
        } => commands::ingest(&manifest, &out, stats),
        Command::Interpret(args) => commands::interpret(args),
        Command::Encode {
            records,
            interpretations,
            out,
            checkpoint,
        } => commands::encode(&records, &interpretations, &out, checkpoint.as_deref()),
        Command::Train {
            config,
            records,
            interpretations,
            out,
        } => commands::train(config.as_deref(), &records, &interpretations, &out),
        Command::Eval {
            run_dir,
            records,
            interpretations,
            json,
        } => commands::eval(&run_dir, &records, &interpretations, json.as_deref()),
        Command::Explain {
            checkpoint,
            meme,
            interpretations,
            records,
            out,
            samples,
            kernel_width,
            seed,
        } => {
            let options = memeguard_core::explainer::ExplainOptions {
                n_samples: samples,
                kernel_width,
                seed,
                ..Default::default()
            };
            commands::explain(
                &checkpoint,
                &meme,
                &interpretations,
                &records,
                &out,
                &options,
            )
        }
        Command::Study(cmd) => commands::study(cmd),
        Command::Serve(args) => commands::serve(args),
        Command::Synth(cmd) => commands::synth(cmd),
    }
}
