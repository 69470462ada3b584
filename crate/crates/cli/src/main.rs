//! `fusecad`: the experiment pipeline as subcommands, from synthetic data
//! generation through featurization, expert pretraining and fine-tuning,
//! consult assembly, cue-guided student training, evaluation grids, and
//! Grad-CAM overlays.
//!
//! Exit codes: 0 success, 2 usage/validation problems, 1 runtime failure.

mod commands;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "fusecad", version, about)]
struct Cli {
    /// Master seed; every random component derives from it.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Worker threads for cross-validation repetitions and grid cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// TOML file with default values for the training options; explicit
    /// flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct TrainOpts {
    /// Learning rate (default 0.001).
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Mini-batch size (default 32).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Maximum training epochs (default 1000).
    #[arg(long)]
    epochs: Option<usize>,
    /// Early-stopping patience in epochs (default 50).
    #[arg(long)]
    patience: Option<usize>,
    /// Minimum validation-loss improvement that resets patience (default 0).
    #[arg(long)]
    min_delta: Option<f64>,
    /// "B,M" pair, or "balanced" for inverse-frequency (default "0.2,1").
    #[arg(long)]
    class_weights: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic nodule dataset (images, manifest, ground-truth
    /// boxes).
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        patients: usize,
        #[arg(long, default_value_t = 0.2)]
        malignant_fraction: f64,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
    /// Compute and cache fusion objects (and LBP/DWT previews) for a
    /// manifest.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        /// Cache directory; defaults to $FUSECAD_CACHE or
        /// `<manifest dir>/fusion_cache`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain expert families on the procedural texture proxy task.
    Pretrain {
        /// Comma-separated family names, or "all".
        #[arg(long, default_value = "all")]
        families: String,
        #[arg(long, default_value = "fused")]
        input_mode: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 400)]
        proxy_images: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Fine-tune one pretrained expert on a manifest.
    Finetune {
        /// Checkpoint base path (no extension) from `pretrain`.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        freeze: f64,
        #[arg(long, default_value = "fused")]
        input_mode: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Output checkpoint base path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Fine-tune experts and train a stacking consult; writes an ensemble
    /// bundle.
    Consult {
        /// Directory of pretrained family checkpoints (from `pretrain`).
        #[arg(long)]
        pretrained_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 3)]
        size: usize,
        #[arg(long, default_value_t = 0.25)]
        freeze: f64,
        #[arg(long, default_value = "fused")]
        input_mode: String,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        /// Stacking head hidden sizes "h1,h2".
        #[arg(long, default_value = "32,16")]
        head_sizes: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Train a cue-guided student against a consult bundle; writes a
    /// self-contained KDL bundle.
    Kdl {
        #[arg(long)]
        consult_bundle: PathBuf,
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long, default_value = "features")]
        cue_join: String,
        #[arg(long, default_value_t = 32)]
        feature_width: usize,
        /// Permit patients shared between the consult's fine-tuning data
        /// and this training manifest (biased, in-domain evaluation).
        #[arg(long)]
        allow_patient_overlap: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Cross-validated experiment suites.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
    /// Grad-CAM overlays for trained KDL bundles.
    Explain {
        /// Directory holding per-mode KDL bundles (`raw/`, `augmented/`,
        /// `fused/`), or a single bundle when only one mode is requested.
        #[arg(long)]
        bundles: PathBuf,
        /// Comma-separated PGM image paths.
        #[arg(long)]
        images: String,
        #[arg(long, default_value = "fused")]
        modes: String,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// "predicted", "benign", or "malignant".
        #[arg(long, default_value = "predicted")]
        target: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render report JSON files as an aligned table.
    Report {
        /// Report JSON files or directories containing them.
        #[arg(long)]
        inputs: Vec<PathBuf>,
        /// Write the table here instead of printing it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Single-expert fine-tuning grid: families x input modes x freeze
    /// fractions, cross-validated.
    Grid {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "all")]
        families: String,
        #[arg(long, default_value = "raw,augmented,fused")]
        inputs: String,
        #[arg(long, default_value = "0,0.25,0.5,0.75")]
        freeze: String,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 400)]
        proxy_images: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Experts-consult sweep (Baseline plus EC-n for each size).
    Ec {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "3,5,7")]
        sizes: String,
        #[arg(long, default_value_t = 0.25)]
        freeze: f64,
        #[arg(long, default_value = "fused")]
        input_mode: String,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 400)]
        proxy_images: usize,
        #[arg(long, default_value = "32,16")]
        head_sizes: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Cue-guided student, cross-validated; consult either rebuilt per
    /// repetition (--consult-size) or loaded fixed (--consult-bundle).
    Kdl {
        #[arg(long)]
        train_manifest: PathBuf,
        #[arg(long)]
        consult_size: Option<usize>,
        #[arg(long)]
        consult_bundle: Option<PathBuf>,
        #[arg(long, default_value = "features")]
        cue_join: String,
        #[arg(long, default_value_t = 32)]
        feature_width: usize,
        #[arg(long, default_value_t = 0.25)]
        freeze: f64,
        #[arg(long, default_value = "fused")]
        input_mode: String,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 400)]
        proxy_images: usize,
        #[arg(long, default_value = "32,16")]
        head_sizes: String,
        #[arg(long)]
        allow_patient_overlap: bool,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
    /// Unaided student baseline (same architecture, constant zero cue).
    Unaided {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "features")]
        cue_join: String,
        #[arg(long, default_value_t = 32)]
        feature_width: usize,
        #[arg(long, default_value = "fused")]
        input_mode: String,
        #[arg(long, default_value_t = 10)]
        repetitions: usize,
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value = "32,16")]
        head_sizes: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        train: TrainOpts,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        // Ignore failure: the global pool may already exist in tests.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match commands::dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(commands::CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(commands::CliError::Runtime(error)) => {
            eprintln!("error: {error:#}");
            ExitCode::from(1)
        }
    }
}
