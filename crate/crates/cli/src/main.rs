use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "advdet", version, about = "Adversarial attacks on toy object detectors")]
struct Cli {
    /// Run configuration (YAML). Defaults are used for anything missing.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Master seed; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// VOC-style dataset root; without it the synthetic generator is used.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic shapes dataset as a VOC-style directory.
    MakeSynthetic {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Also render a clip of this many frames under `<out>/video`.
        #[arg(long, value_name = "N")]
        video_frames: Option<usize>,
    },
    /// Train the proposal-based and regression-based detectors.
    TrainDetector {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Train the adversarial generator against the proposal-based detector.
    TrainGenerator {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        detectors: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Drop the feature loss (class-loss-only ablation).
        #[arg(long)]
        no_feature_loss: bool,
        /// Loss weight overrides, e.g. `alpha=0.05,beta=1,epsilon=1e-4:2e-4`.
        #[arg(long, value_name = "KEY=VALUE,...")]
        weights: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Attack an image, a directory of images, or a frame directory.
    Attack {
        #[arg(long, value_enum)]
        method: Method,
        #[arg(long, value_enum, default_value_t = InputKind::Image)]
        input: InputKind,
        /// Image file or directory.
        #[arg(long, value_name = "PATH")]
        path: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Generator checkpoint (for `--method uea`).
        #[arg(long, value_name = "DIR")]
        generator: Option<PathBuf>,
        /// Detector pair (for `--method dag`).
        #[arg(long, value_name = "DIR")]
        detectors: Option<PathBuf>,
    },
    /// Evaluate attacks on the test split against both detectors.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        detectors: PathBuf,
        /// Directory of precomputed adversarial images, matched by file stem.
        #[arg(long, value_name = "DIR")]
        adversarial: Option<PathBuf>,
        /// Generator checkpoint to attack with.
        #[arg(long, value_name = "DIR")]
        generator: Option<PathBuf>,
        /// Also run the iterative baseline.
        #[arg(long)]
        dag: bool,
        /// Results file (line-delimited JSON); defaults to `<output_dir>/results.jsonl`.
        #[arg(long, value_name = "FILE")]
        results: Option<PathBuf>,
    },
    /// Per-image attack time of both methods.
    Bench {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "DIR")]
        detectors: PathBuf,
        /// Generator checkpoint; an untrained generator costs the same.
        #[arg(long, value_name = "DIR")]
        generator: Option<PathBuf>,
        #[arg(long, default_value_t = 10)]
        images: usize,
        #[arg(long, default_value_t = 1)]
        warmup: usize,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Method {
    Uea,
    Dag,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum InputKind {
    Image,
    Frames,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
