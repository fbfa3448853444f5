//! `pointunet`: run the pipeline stage by stage, each stage reading and
//! writing files under the configured directories.

mod commands;
mod failure;
mod layout;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pointunet::metrics::TrackingAllocator;
use pointunet::pipeline::{PipelineConfig, Sampling};

use failure::{Failure, Kind, Tag as _};

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser, Debug)]
#[command(name = "pointunet", version, about = "Saliency-guided point-based volume segmentation")]
pub struct Cli {
    /// Pipeline configuration (TOML). Without it the built-in defaults apply.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; overrides the one in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for per-volume work.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Report directory; overrides `paths.reports`.
    #[arg(long, global = true, env = "POINTUNET_REPORT_DIR")]
    report_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SamplingArg {
    ContextAware,
    Random,
}

impl From<SamplingArg> for Sampling {
    fn from(s: SamplingArg) -> Self {
        match s {
            SamplingArg::ContextAware => Sampling::ContextAware,
            SamplingArg::Random => Sampling::Random,
        }
    }
}

#[derive(Args, Debug, Clone, Default)]
pub struct SamplerArgs {
    /// Saliency threshold for foreground points.
    #[arg(long)]
    threshold: Option<f64>,
    /// Point budget per cloud.
    #[arg(long)]
    points: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the phantom dataset.
    GenData {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the saliency network on the training cases.
    TrainSaliency {
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a point cloud (and saliency map) for every case.
    Sample {
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, value_enum, default_value = "context-aware")]
        sampling: SamplingArg,
        /// Cloud directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the point segmentation network on the sampled training clouds.
    TrainSeg {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_enum, default_value = "context-aware")]
        sampling: SamplingArg,
        /// Cloud directory to read; defaults to the one `sample` writes.
        #[arg(long)]
        clouds: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Single-pass inference on the holdout cases.
    Infer {
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long, value_enum, default_value = "context-aware")]
        sampling: SamplingArg,
        /// Replace both networks by the ground truth: the labels become the
        /// saliency map and are copied onto the points.
        #[arg(long)]
        oracle: bool,
        /// Prediction directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions against the ground truth.
    Evaluate {
        #[arg(long, value_enum, default_value = "context-aware")]
        sampling: SamplingArg,
        /// Prediction directory; defaults to the one `infer` writes.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Report directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Holdout scores of the trained models at several thresholds.
    SweepThreshold {
        #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.7, 0.8, 0.9, 0.95])]
        taus: Vec<f64>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score ablation variants (A full, B random sampling, C cross-entropy).
    Ablate {
        #[arg(long, value_delimiter = ',', default_values_t = ["A".to_string(), "B".to_string(), "C".to_string()])]
        variants: Vec<String>,
        /// Segmentation epochs.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        points: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Stage timings, peak memory and the multi-pass random-sampling series.
    Bench {
        #[arg(long, default_value_t = 3)]
        repeat: usize,
        /// Random-sampling passes in the series.
        #[arg(long, default_value_t = 8)]
        passes: usize,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Reads the config file (if any), applies `--seed`, and validates.
pub fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut table = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))
                .tag(Kind::Config)?;
            text.parse::<toml::Table>()
                .map_err(|e| anyhow::anyhow!("{}: {e}", path.display()))
                .tag(Kind::Config)?
        }
        None => toml::Table::new(),
    };
    if let Some(seed) = cli.seed {
        let seed = i64::try_from(seed)
            .map_err(|_| anyhow::anyhow!("seed {seed} does not fit a TOML integer"))
            .tag(Kind::Config)?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    if !table.contains_key("seed") {
        return Err(Failure::new(
            Kind::Config,
            anyhow::anyhow!("a seed is required: set `seed` in the config or pass --seed"),
        ));
    }
    let mut cfg: PipelineConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| anyhow::anyhow!("config: {e}"))
        .tag(Kind::Config)?;
    if let Some(dir) = &cli.report_dir {
        cfg.paths.reports = dir.clone();
    }
    cfg.validate().tag(Kind::Config)?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.kind.code())
        }
    }
}
