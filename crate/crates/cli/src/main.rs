mod commands;
mod config;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use superdiff::dataset::Split;
use superdiff::eval::MatrixChoice;
use tracing_subscriber::EnvFilter;

use config::RunArgs;

#[derive(Debug, Parser)]
#[command(
    name = "superdiff",
    version,
    about = "Learned spectral graph diffusion for salient object detection"
)]
#[command(args_override_self = true)]
pub struct Cli {
    /// key=value file of run settings; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(flatten)]
    run: RunArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
            SplitArg::All => Split::All,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit integration weights on the training split.
    Train,
    /// Write a saliency map for each input image.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        /// Directory holding `<image stem>.csv` feature files.
        #[arg(long)]
        features_dir: Option<PathBuf>,
        /// Defaults to `<output-dir>/maps`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Score trained weights against ground truth.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Diffuse an existing saliency method's maps and score before and after.
    Promote {
        /// Method name under `<dataset>/seedmaps/`.
        #[arg(long, conflicts_with = "seedmap_dir")]
        method: Option<String>,
        /// Directory of `<id>.png` seed maps.
        #[arg(long)]
        seedmap_dir: Option<PathBuf>,
        #[arg(long, default_value = "refined")]
        matrix: MatrixChoice,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Average constrained optimal seed efficiency curve.
    Cose {
        #[arg(long, default_value = "refined")]
        matrix: MatrixChoice,
        #[arg(long, default_value_t = superdiff::eval::omp::DEFAULT_BIN_THRESHOLD)]
        bin_threshold: f64,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
    /// Incremental stages S0 to S7.
    Ablate,
    /// Generate a procedural dataset under the dataset root.
    Synth {
        #[arg(long, default_value_t = 200)]
        n_images: usize,
        #[arg(long, default_value_t = 120)]
        width: u32,
        #[arg(long, default_value_t = 90)]
        height: u32,
    },
}

fn parse_cli() -> anyhow::Result<Cli> {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let first = Cli::parse_from(&argv);
    let Some(path) = &first.config else {
        return Ok(first);
    };
    let mut merged = vec![argv[0].clone()];
    merged.extend(config::config_file_args(path)?);
    merged.extend(argv[1..].iter().cloned());
    Ok(Cli::parse_from(merged))
}

fn run() -> anyhow::Result<()> {
    let cli = parse_cli()?;
    let cfg = cli.run.resolve();
    rayon::ThreadPoolBuilder::new().num_threads(cfg.jobs).build_global()?;
    match cli.command {
        Command::Train => commands::train(&cfg),
        Command::Detect {
            weights,
            features_dir,
            out_dir,
            images,
        } => commands::detect(&cfg, &weights, features_dir.as_deref(), out_dir, &images),
        Command::Evaluate { weights, split } => commands::evaluate(&cfg, &weights, split.into()),
        Command::Promote {
            method,
            seedmap_dir,
            matrix,
            split,
        } => commands::promote(&cfg, method.as_deref(), seedmap_dir, matrix, split.into()),
        Command::Cose {
            matrix,
            bin_threshold,
            split,
        } => commands::cose(&cfg, matrix, bin_threshold, split.into()),
        Command::Ablate => commands::ablate(&cfg),
        Command::Synth {
            n_images,
            width,
            height,
        } => commands::synth(&cfg, n_images, width, height),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!("{e:#}");
            ExitCode::FAILURE
        }
    }
}
