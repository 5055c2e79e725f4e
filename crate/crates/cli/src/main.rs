mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Dataset engineering, toy training and evaluation for multi-dataset animal pose.
#[derive(Debug, Parser)]
#[command(name = "panpose", version)]
pub struct Cli {
    /// Machine-readable JSON on stdout instead of text.
    #[arg(long, global = true)]
    pub json: bool,

    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads for per-image and per-dataset work (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,

    /// TOML config; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More logging on stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check a COCO keypoint file against the dataset invariants.
    Validate {
        input: PathBuf,
    },
    /// Merge datasets onto the keypoint superset of a conversion table.
    Merge(MergeArgs),
    /// Re-index one dataset into superset channel order.
    Project(ProjectArgs),
    /// Render target heatmaps, one `<image id>.hm` file per image.
    Encode(EncodeArgs),
    /// Turn predicted heatmaps back into keypoint predictions.
    Decode(DecodeArgs),
    /// Build a data-ratio or sparse-keypoint training split.
    Split(SplitArgs),
    /// Convert predictions into pseudo ground truth.
    PseudoLabel {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear toy predictor on a dataset.
    TrainToy(TrainArgs),
    /// Predict with a trained toy predictor.
    Predict(PredictArgs),
    /// Briefly fine-tune a toy predictor on pseudo-labels.
    FinetunePseudo(FinetuneArgs),
    /// Fill in bounding boxes from the keypoint extent plus a margin.
    BboxHeuristic {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = panpose::eval::DEFAULT_BBOX_MARGIN)]
        margin: f64,
        /// Replace boxes that are already present.
        #[arg(long)]
        overwrite: bool,
    },
    /// OKS-based mAP of predictions against ground truth.
    Eval(EvalArgs),
    /// Train with and without gradient masking on a synthetic two-source set.
    DemoMasking(DemoArgs),
}

#[derive(Debug, Args)]
pub struct MergeArgs {
    /// Input datasets, merged in the order given.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    /// Conversion table CSV; without one the inputs must share a vocabulary.
    #[arg(long)]
    pub table: Option<PathBuf>,
    /// Superset order file, one name per line.
    #[arg(long, requires = "table")]
    pub superset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Where to write the merge report (default: stdout).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProjectArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long)]
    pub superset: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Gaussian sigma in heatmap cells.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub stride: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DecodeModeArg {
    /// Best peak per channel, one prediction per image.
    Single,
    /// Every local maximum, grouped into individuals with tag maps.
    Multi,
}

#[derive(Debug, Args)]
pub struct DecodeArgs {
    /// Directory of `<image id>.hm` files.
    pub heatmaps: PathBuf,
    /// Dataset supplying the images and keypoint names.
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = DecodeModeArg::Single)]
    pub mode: DecodeModeArg,
    /// Directory of `<image id>.tag` files (multi mode).
    #[arg(long)]
    pub tags: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub tag_threshold: Option<f64>,
    #[arg(long)]
    pub max_individuals: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitKindArg {
    DataRatio,
    SparseKeypoints,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long, value_enum)]
    pub kind: SplitKindArg,
    #[arg(long)]
    pub fraction: f64,
    /// Training split to subsample or sparsify.
    #[arg(long)]
    pub train: PathBuf,
    /// Test split, copied through unchanged.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct FeatureArgs {
    /// Images whose `source` equals this get the style feature planes.
    #[arg(long)]
    pub styled_source: Option<String>,
    /// Noise standard deviation on the rendered feature planes.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    pub dataset: PathBuf,
    /// Parameter file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch loss CSV.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Train on every channel, labeled or not.
    #[arg(long)]
    pub no_masking: bool,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    pub dataset: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// Pseudo-labeled dataset.
    pub pseudo: PathBuf,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[command(flatten)]
    pub features: FeatureArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Sigma TOML file (`sigma = ...` or `sigmas = [...]`).
    #[arg(long)]
    pub sigma_config: Option<PathBuf>,
    /// One sigma for every keypoint, or `coco-mean` / `lab-mouse`.
    #[arg(long)]
    pub sigma: Option<String>,
    /// JSON report path.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// CSV of matches at OKS 0.50.
    #[arg(long)]
    pub matches: Option<PathBuf>,
    #[arg(long, default_value_t = panpose::eval::DEFAULT_MAX_DETS)]
    pub max_dets: usize,
    #[arg(long, default_value_t = panpose::eval::DEFAULT_BBOX_MARGIN)]
    pub bbox_margin: f64,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    /// A single masked run, no comparison.
    #[arg(long)]
    pub masking_only: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub train_images: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .target(env_logger::Target::Stderr)
        .init();

    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }

    match commands::run(&cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for I/O and usage problems, 1 for everything the data is to blame for.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<config::UsageError>().is_some() || err.downcast_ref::<std::io::Error>().is_some() {
        return 2;
    }
    match err.downcast_ref::<panpose::Error>() {
        Some(e) if e.is_io() => 2,
        _ => 1,
    }
}
