use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dntx::commands::{self, DriveSource, Run, Stage};
use dntx::config::{extract_overrides, resolve, SEED_ENV};
use dntx::Result;

/// Talking-face synthesis with dynamic neural textures.
///
/// Any configuration field can be overridden with `--<section>.<field>=<json>`,
/// for example `--train.max_steps=200` or `--dataset.height=32`.
#[derive(Parser)]
#[command(name = "dntx", version)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed; every component seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct DriveArgs {
    /// Dataset directory to take the driving clip from.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Clip id within the dataset (first clip by default).
    #[arg(long)]
    clip: Option<String>,
    /// Feature container with `audio_features` and optionally `pose_seq`.
    #[arg(long, conflicts_with = "data")]
    audio: Option<PathBuf>,
    /// Background PNG used for every frame.
    #[arg(long)]
    background: Option<PathBuf>,
}

impl From<DriveArgs> for DriveSource {
    fn from(a: DriveArgs) -> Self {
        Self { data: a.data, clip: a.clip, audio: a.audio, background: a.background }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset.
    Dataset,
    /// Train the decoupling network, the audio network and the renderer.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        stage: Stage,
        /// Continue from an existing checkpoint.
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Render frames under a keyframed expression timeline.
    Synthesize {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        timeline: PathBuf,
        #[command(flatten)]
        drive: DriveArgs,
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Image quality and expression accuracy on a dataset split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Classify frames with and without texture to compare information content.
    Evidence {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compare analytic and numerical gradients of every module.
    Gradcheck {
        #[arg(long = "module")]
        modules: Vec<String>,
        #[arg(long)]
        inject_fault: bool,
        #[arg(long, default_value_t = 64)]
        samples: usize,
    },
    /// Time each synthesis stage.
    Bench {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        drive: DriveArgs,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Serve live sessions over HTTP and websockets.
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        drive: DriveArgs,
        #[arg(long)]
        bind: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Dataset => "dataset",
            Command::Train { .. } => "train",
            Command::Synthesize { .. } => "synthesize",
            Command::Evaluate { .. } => "evaluate",
            Command::Evidence { .. } => "evidence",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Bench { .. } => "bench",
            Command::Serve { .. } => "serve",
        }
    }
}

fn run(cli: Cli, overrides: &[String]) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let resolved = resolve(cli.config.as_deref(), overrides, cli.seed, env_seed.as_deref(), cli.out.as_deref())?;
    let mut run = Run::start(resolved.config, resolved.seed_source, cli.command.name())?;
    match cli.command {
        Command::Dataset => commands::dataset(&mut run),
        Command::Train { data, stage, init } => commands::train(&mut run, &data, stage, init.as_deref()),
        Command::Synthesize { checkpoint, timeline, drive, frames } => {
            commands::synthesize(&mut run, &checkpoint, &timeline, &drive.into(), frames)
        }
        Command::Evaluate { checkpoint, data } => commands::evaluate(&mut run, &checkpoint, &data),
        Command::Evidence { data } => commands::evidence(&mut run, data.as_deref()),
        Command::Gradcheck { modules, inject_fault, samples } => commands::gradcheck(&mut run, &modules, inject_fault, samples),
        Command::Bench { checkpoint, drive, frames, threads } => {
            commands::bench(&mut run, &checkpoint, &drive.into(), frames, threads.max(1))
        }
        Command::Serve { checkpoint, drive, bind } => commands::serve(&mut run, &checkpoint, &drive.into(), bind.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = extract_overrides(std::env::args().collect());
    let cli = Cli::parse_from(args);
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
