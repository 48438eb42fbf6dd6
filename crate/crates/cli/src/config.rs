//! Run configuration: command-line flags layered over an optional
//! `key=value` file whose keys are the long flag names.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{ArgAction, Args, CommandFactory, ValueEnum};
use serde::Serialize;
use superdiff::graph::DistanceMode;
use superdiff::ingest::ColorSpace;
use superdiff::refine::{
    RefineParams, VarianceMode, DEFAULT_L_MAX, DEFAULT_SCALED_VAR_THRESHOLD, DEFAULT_VAR_THRESHOLD,
};
use superdiff::seeds::DEFAULT_GAUSSIAN_VARIANCES;
use superdiff::spectral::EigvecNorm;
use superdiff::superpixel::{SlicParams, DEFAULT_COMPACTNESS, DEFAULT_N_SUPERPIXELS, DEFAULT_SLIC_ITERATIONS};
use superdiff::train::{GridSettings, DEFAULT_SIGMA2};

use crate::Cli;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormArg {
    Euclidean,
    DOrthonormal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceArg {
    Euclidean,
    Squared,
}

/// Flags shared by every subcommand. Unset values fall back to the config
/// file, then to the built-in defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Dataset directory with images/, masks/, features/ and seedmaps/.
    #[arg(long, global = true)]
    pub dataset_root: Option<PathBuf>,

    /// Comma-separated subset of lab, rgb, hsv.
    #[arg(long, global = true, value_delimiter = ',', action = ArgAction::Set)]
    pub color_spaces: Option<Vec<ColorSpace>>,

    #[arg(long, global = true, value_delimiter = ',', action = ArgAction::Set)]
    pub sigma2_list: Option<Vec<f64>>,

    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(16..=2000))]
    pub n_superpixels: Option<u64>,

    #[arg(long, global = true)]
    pub compactness: Option<f64>,

    #[arg(long, global = true)]
    pub slic_iterations: Option<usize>,

    /// Minimum eigenvector discriminability kept by refinement.
    #[arg(long, global = true)]
    pub var_threshold: Option<f64>,

    /// Largest eigenvalue position searched for the eigengap.
    #[arg(long, global = true)]
    pub l_max: Option<usize>,

    /// Measure discriminability on eigenvectors rescaled to [0, 255].
    #[arg(long, global = true, action = ArgAction::Set)]
    pub scaled_variance: Option<bool>,

    #[arg(long, global = true, value_delimiter = ',', action = ArgAction::Set)]
    pub gaussian_variances: Option<Vec<f64>>,

    #[arg(long, global = true, action = ArgAction::Set)]
    pub absorbed_time: Option<bool>,

    /// Add the external-feature block to the column bank.
    #[arg(long, global = true, action = ArgAction::Set)]
    pub use_features: Option<bool>,

    #[arg(long, global = true, value_enum)]
    pub eigvec_norm: Option<NormArg>,

    #[arg(long, global = true, value_enum)]
    pub distance: Option<DistanceArg>,

    #[arg(long, global = true)]
    pub seed_of_rng: Option<u64>,

    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,

    /// Use only the first N images of the dataset in sorted order.
    #[arg(long, global = true)]
    pub max_images: Option<usize>,

    /// Worker threads; 0 lets the pool decide.
    #[arg(long, global = true, env = "SUPERDIFF_JOBS")]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub color_spaces: Vec<ColorSpace>,
    pub sigma2_list: Vec<f64>,
    pub n_superpixels: usize,
    pub compactness: f64,
    pub slic_iterations: usize,
    pub var_threshold: f64,
    pub l_max: usize,
    pub scaled_variance: bool,
    pub gaussian_variances: Vec<f64>,
    pub absorbed_time: bool,
    pub use_features: bool,
    pub eigvec_norm: NormArg,
    pub distance: DistanceArg,
    pub seed_of_rng: u64,
    pub output_dir: PathBuf,
    pub max_images: Option<usize>,
    #[serde(skip)]
    pub jobs: usize,
}

impl RunArgs {
    pub fn resolve(&self) -> RunConfig {
        let scaled_variance = self.scaled_variance.unwrap_or(false);
        let default_thr = if scaled_variance {
            DEFAULT_SCALED_VAR_THRESHOLD
        } else {
            DEFAULT_VAR_THRESHOLD
        };
        RunConfig {
            dataset_root: self.dataset_root.clone(),
            color_spaces: self.color_spaces.clone().unwrap_or_else(|| ColorSpace::ALL.to_vec()),
            sigma2_list: self.sigma2_list.clone().unwrap_or_else(|| DEFAULT_SIGMA2.to_vec()),
            n_superpixels: self.n_superpixels.map_or(DEFAULT_N_SUPERPIXELS, |n| n as usize),
            compactness: self.compactness.unwrap_or(DEFAULT_COMPACTNESS),
            slic_iterations: self.slic_iterations.unwrap_or(DEFAULT_SLIC_ITERATIONS),
            var_threshold: self.var_threshold.unwrap_or(default_thr),
            l_max: self.l_max.unwrap_or(DEFAULT_L_MAX),
            scaled_variance,
            gaussian_variances: self
                .gaussian_variances
                .clone()
                .unwrap_or_else(|| DEFAULT_GAUSSIAN_VARIANCES.to_vec()),
            absorbed_time: self.absorbed_time.unwrap_or(true),
            use_features: self.use_features.unwrap_or(false),
            eigvec_norm: self.eigvec_norm.unwrap_or(NormArg::Euclidean),
            distance: self.distance.unwrap_or(DistanceArg::Euclidean),
            seed_of_rng: self.seed_of_rng.unwrap_or(0),
            output_dir: self
                .output_dir
                .clone()
                .unwrap_or_else(|| PathBuf::from("superdiff-out")),
            max_images: self.max_images,
            jobs: self.jobs.unwrap_or(0),
        }
    }
}

impl RunConfig {
    pub fn grid_settings(&self) -> GridSettings {
        GridSettings {
            slic: SlicParams {
                n_target: self.n_superpixels,
                compactness: self.compactness,
                iterations: self.slic_iterations,
            },
            spaces: self.color_spaces.clone(),
            sigma2_list: self.sigma2_list.clone(),
            gaussian_variances: self.gaussian_variances.clone(),
            absorbed_time: self.absorbed_time,
            refine: RefineParams {
                var_threshold: self.var_threshold,
                l_max: self.l_max,
                variance_mode: if self.scaled_variance {
                    VarianceMode::Scaled255
                } else {
                    VarianceMode::UnitNorm
                },
            },
            distance_mode: match self.distance {
                DistanceArg::Euclidean => DistanceMode::Euclidean,
                DistanceArg::Squared => DistanceMode::Squared,
            },
            eigvec_norm: match self.eigvec_norm {
                NormArg::Euclidean => EigvecNorm::Euclidean,
                NormArg::DOrthonormal => EigvecNorm::DOrthonormal,
            },
            use_features: self.use_features,
        }
    }

    pub fn dataset_root(&self) -> anyhow::Result<&Path> {
        self.dataset_root
            .as_deref()
            .context("no dataset root; pass --dataset-root or set dataset_root in the config file")
    }
}

/// Turns a config file into `--key=value` arguments. Blank lines and lines
/// starting with `#` are ignored.
pub fn config_file_args(path: &Path) -> anyhow::Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cmd = Cli::command();
    let known: Vec<String> = cmd
        .get_arguments()
        .filter(|a| a.is_global_set() && a.get_id() != "config")
        .filter_map(|a| a.get_long().map(str::to_owned))
        .collect();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            bail!("{}:{}: expected key=value", path.display(), lineno + 1);
        };
        let flag = key.trim().replace('_', "-");
        if !known.contains(&flag) {
            bail!("{}:{}: unknown key '{}'", path.display(), lineno + 1, key.trim());
        }
        out.push(OsString::from(format!("--{flag}={}", value.trim())));
    }
    Ok(out)
}
