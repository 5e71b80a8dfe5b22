use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod data;

#[derive(Debug, Parser)]
#[command(
    name = "posekit",
    version,
    about = "Camera pose regression from sparse features"
)]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true, env = "POSEKIT_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Indoor,
    Outdoor,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ConfigKind {
    Toy,
    Augment,
    Net,
    Train,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic room scene: NVM, descriptor sidecar and ground truth.
    ToyScene {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the seed in the configuration.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Mine synthetic training views from the point cloud.
    Synthesize {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        descriptors: PathBuf,
        /// Ground-truth JSON or whitespace-separated image ids.
        #[arg(long)]
        test_ids: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        samples_per_pose: Option<usize>,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
    },
    /// Train a network on scene and synthesis directories.
    Train {
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        net_config: Option<PathBuf>,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Metrics CSV (default: checkpoint path with `.metrics.csv`).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Also write the checkpoint after every K epochs.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides the seed in the training configuration.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the epoch count in the training configuration.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Median position and rotation errors on the test images of a scene directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
        /// Training configuration the checkpoint was trained with (for the position encoding).
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Writes `<prefix>pos.csv` and `<prefix>ang.csv` cumulative error curves.
        #[arg(long)]
        cdf_prefix: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-keypoint pooling contribution for one image.
    Contrib {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image_features: PathBuf,
        /// Sidecar section id (default: the first section).
        #[arg(long)]
        image: Option<u32>,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 640)]
        width: u32,
        #[arg(long, default_value_t = 480)]
        height: u32,
        #[arg(long)]
        train_config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a default configuration file.
    Defaults {
        #[arg(value_enum)]
        kind: ConfigKind,
    },
}

/// 1 for domain errors, 2 for usage, parse and IO errors.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<posekit::Error>() {
            return match e {
                posekit::Error::Io(_)
                | posekit::Error::Json(_)
                | posekit::Error::ParseError { .. } => 2,
                _ => 1,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n);
    }
    let result = match pool.build() {
        Ok(pool) => pool.install(|| commands::run(cli.command)),
        Err(e) => Err(anyhow::Error::new(e).context("cannot start worker threads")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
