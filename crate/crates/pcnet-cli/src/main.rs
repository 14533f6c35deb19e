//! Command-line entry point: train, evaluate, mine pairs, generate data, run
//! ablations, verify gradients, export attention maps.
//!
//! Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure,
//! 4 i/o error.

mod commands;
mod dataset;
mod run_dir;

use clap::{Args, Parser, Subcommand};
use pcnet_core::{Error, ErrorKind};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pcnet",
    about = "Pairwise-comparison scene classifier: training, evaluation and ablations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset selection shared by several subcommands.
#[derive(Args, Clone, Debug)]
struct DatasetArgs {
    /// `synth` for the procedural texture set, or a path to a
    /// `root/<class>/<images>` tree.
    #[arg(long, default_value = "synth")]
    dataset: String,

    /// Synthetic classes (4..=16).
    #[arg(long, default_value_t = 8)]
    synth_classes: usize,

    /// Synthetic images per class.
    #[arg(long, default_value_t = 150)]
    synth_per_class: usize,

    /// Fraction of each class that goes to the train split.
    #[arg(long, default_value_t = 2.0 / 3.0)]
    train_fraction: f64,
}

/// Flag overrides applied on top of `--config` (flags win).
#[derive(Args, Clone, Debug, Default)]
struct ConfigOverrides {
    /// Line-oriented `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Individual `key=value` overrides; may repeat. Keys match the config
    /// file (e.g. `--set epochs=30 --set lambda=0.8`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[arg(long)]
    epochs: Option<usize>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(long)]
    lambda: Option<f64>,

    #[arg(long)]
    epsilon: Option<f64>,

    /// `f32` or `f64`.
    #[arg(long)]
    precision: Option<String>,

    /// Partner-ranking metric: euclidean, cosine or random.
    #[arg(long)]
    metric: Option<String>,

    /// Pair construction: SS, SD, SRandom or RandomRandom.
    #[arg(long)]
    strategy: Option<String>,

    /// single or multi.
    #[arg(long)]
    architecture: Option<String>,

    /// self, mutual or both.
    #[arg(long)]
    representation: Option<String>,

    /// lc or lc+lr.
    #[arg(long)]
    objective: Option<String>,

    /// Classes per batch (P).
    #[arg(long)]
    classes_per_batch: Option<usize>,

    /// Images per class per batch (K).
    #[arg(long)]
    images_per_class: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the network and write metrics, checkpoints and a manifest.
    Train {
        #[command(flatten)]
        data: DatasetArgs,

        #[command(flatten)]
        overrides: ConfigOverrides,

        /// Output directory (default: a timestamped directory under the
        /// output root; see PCNET_OUT_ROOT).
        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Resume from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,

        /// Rerun exactly the run described by a manifest file.
        #[arg(long)]
        from_manifest: Option<PathBuf>,
    },

    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,

        #[command(flatten)]
        data: DatasetArgs,

        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Apply evaluation-time channel attention (ablation only).
        #[arg(long)]
        eval_time_eca: bool,
    },

    /// Sample one batch, select pairs and dump the assignment as CSV.
    Pairs {
        #[command(flatten)]
        data: DatasetArgs,

        /// Model weights to extract features with; a fresh seeded
        /// initialization is used when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,

        #[command(flatten)]
        overrides: ConfigOverrides,

        #[arg(long)]
        out_dir: Option<PathBuf>,
    },

    /// Generate the synthetic texture dataset as a PNG tree.
    Synth {
        #[arg(long, default_value_t = 8)]
        classes: usize,

        #[arg(long, default_value_t = 150)]
        per_class: usize,

        /// Image height and width.
        #[arg(long, default_value_t = 64)]
        size: usize,

        #[arg(long, default_value_t = 0)]
        seed: u64,

        #[arg(long)]
        out: PathBuf,
    },

    /// Run the ablation grid (component, metric, strategy and lambda rows).
    Ablate {
        #[command(flatten)]
        data: DatasetArgs,

        #[command(flatten)]
        overrides: ConfigOverrides,

        #[arg(long)]
        out_dir: Option<PathBuf>,

        /// Only run rows of these sections (comma-separated:
        /// table3,table4,table5,table6,reference).
        #[arg(long)]
        sections: Option<String>,
    },

    /// Verify every differentiable operation against central finite
    /// differences and print the error table.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,

        #[arg(long, default_value_t = 7)]
        seed: u64,
    },

    /// Export the attention response maps of an image pair.
    ExportAttn {
        #[arg(long)]
        checkpoint: PathBuf,

        #[command(flatten)]
        data: DatasetArgs,

        /// Test-split index of the first image.
        #[arg(long, default_value_t = 0)]
        index_a: usize,

        /// Test-split index of the second image.
        #[arg(long, default_value_t = 1)]
        index_b: usize,

        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Numerical => 3,
                ErrorKind::Io => 4,
            };
            ExitCode::from(code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            data,
            overrides,
            out_dir,
            resume,
            from_manifest,
        } => commands::train::run(data, overrides, out_dir, resume, from_manifest),
        Command::Eval {
            checkpoint,
            data,
            out_dir,
            eval_time_eca,
        } => commands::eval::run(checkpoint, data, out_dir, eval_time_eca),
        Command::Pairs {
            data,
            checkpoint,
            overrides,
            out_dir,
        } => commands::pairs::run(data, checkpoint, overrides, out_dir),
        Command::Synth {
            classes,
            per_class,
            size,
            seed,
            out,
        } => commands::synth::run(classes, per_class, size, seed, out),
        Command::Ablate {
            data,
            overrides,
            out_dir,
            sections,
        } => commands::ablate::run(data, overrides, out_dir, sections),
        Command::Gradcheck { instances, seed } => commands::gradcheck::run(instances, seed),
        Command::ExportAttn {
            checkpoint,
            data,
            index_a,
            index_b,
            out_dir,
        } => commands::export_attn::run(checkpoint, data, index_a, index_b, out_dir),
    }
}
