use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prvr_cli::commands::{self, SplitArg};
use prvr_cli::manifest::RunTracker;

#[derive(Parser)]
#[command(
    name = "prvr",
    version,
    about = "Partially relevant video retrieval on synthetic corpora"
)]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "PRVR_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus from a TOML spec.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; `--checkpoint` resumes from a saved state.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieval metrics of a checkpoint on a corpus split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Prebuilt index; must carry the checkpoint's fingerprint.
        #[arg(long)]
        index: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encode a split into a binary retrieval index.
    Index {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-query latency and index memory of a saved index.
    Bench {
        #[arg(long)]
        index: PathBuf,
        #[arg(long, default_value_t = 200)]
        queries: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every grid cell under every seed and report medians.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Positioning-variance report and clip similarity heatmaps.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        label: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Index { .. } => "index",
            Command::Bench { .. } => "bench",
            Command::Ablate { .. } => "ablate",
            Command::Diagnose { .. } => "diagnose",
        }
    }

    fn out(&self) -> &PathBuf {
        match self {
            Command::GenData { out, .. }
            | Command::Train { out, .. }
            | Command::Eval { out, .. }
            | Command::Index { out, .. }
            | Command::Bench { out, .. }
            | Command::Ablate { out, .. }
            | Command::Diagnose { out, .. } => out,
        }
    }

    fn run(&self, run: &mut RunTracker) -> anyhow::Result<()> {
        match self {
            Command::GenData { config, seed, out } => {
                commands::gen_data(config.as_deref(), *seed, out, run)
            }
            Command::Train {
                config,
                corpus,
                seed,
                checkpoint,
                out,
            } => commands::train(
                config.as_deref(),
                corpus,
                *seed,
                checkpoint.as_deref(),
                out,
                run,
            ),
            Command::Eval {
                checkpoint,
                corpus,
                index,
                split,
                out,
            } => commands::eval(checkpoint, corpus, index.as_deref(), *split, out, run),
            Command::Index {
                checkpoint,
                corpus,
                split,
                out,
            } => commands::index(checkpoint, corpus, *split, out, run),
            Command::Bench {
                index,
                queries,
                seed,
                out,
            } => commands::bench(index, *queries, *seed, out, run),
            Command::Ablate { grid, corpus, out } => commands::ablate(grid, corpus, out, run),
            Command::Diagnose {
                checkpoint,
                corpus,
                split,
                label,
                out,
            } => commands::diagnose(checkpoint, corpus, *split, label.as_deref(), out, run),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let mut run = RunTracker::new(cli.command.name());
    let result = cli.command.run(&mut run);
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {e:#}"),
    };
    let written = run.finish(cli.command.out(), &status);
    match (result, written) {
        (Ok(()), Ok(())) => ExitCode::SUCCESS,
        (Err(e), _) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
        (Ok(()), Err(e)) => {
            eprintln!("error: writing run manifest: {e:#}");
            ExitCode::FAILURE
        }
    }
}
