use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};
use superdiff::dataset::{Dataset, PreparedImage, Split};
use superdiff::eval::metrics::roc_curve;
use superdiff::eval::{
    ablate as run_ablation, cose as run_cose, evaluate_maps, promote as run_promotion, MatrixChoice,
};
use superdiff::ingest::{load_feature_bank, load_gray, load_sample};
use superdiff::superpixel::segment_with;
use superdiff::synth::{generate_dataset, SynthConfig};
use superdiff::train::{
    build_column_bank, fit_weights, infer, training_loss, weight_summary, ColumnBank, GridSettings, SaliencyMap,
    WeightVector,
};
use tracing::{error, info};

use crate::config::RunConfig;

/// Files written by one command, listed with their digests in the run
/// manifest.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

#[derive(Serialize)]
struct OutputEntry {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    settings_hash: String,
    settings: &'a GridSettings,
    config: &'a RunConfig,
    dataset: Option<String>,
    n_images: usize,
    outputs: Vec<OutputEntry>,
}

impl Outputs {
    fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    /// Registers `rel` and returns its full path, creating parent folders.
    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    fn write(&mut self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(rel)?;
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))
    }

    fn write_json(&mut self, rel: &str, value: &impl Serialize) -> Result<()> {
        self.write(rel, serde_json::to_string_pretty(value)? + "\n")
    }

    fn finish(
        mut self,
        command: &str,
        cfg: &RunConfig,
        settings: &GridSettings,
        dataset: Option<&Dataset>,
        n_images: usize,
    ) -> Result<()> {
        let mut files = std::mem::take(&mut self.files);
        files.sort();
        files.dedup();
        let outputs = files
            .into_iter()
            .map(|path| {
                let bytes = std::fs::read(self.dir.join(&path))?;
                Ok(OutputEntry {
                    sha256: hex::encode(Sha256::digest(&bytes)),
                    path,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            settings_hash: settings.hash(),
            settings,
            config: cfg,
            dataset: dataset.map(Dataset::name),
            n_images,
            outputs,
        };
        let path = self.dir.join(format!("manifest-{command}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
        info!(manifest = %path.display(), "done");
        Ok(())
    }
}

fn settings_for(cfg: &RunConfig) -> Result<GridSettings> {
    let settings = cfg.grid_settings();
    settings.validate()?;
    Ok(settings)
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.dataset_root()?;
    let ds = Dataset::open(root).with_context(|| format!("opening dataset {}", root.display()))?;
    Ok(match cfg.max_images {
        Some(n) => ds.truncated(n),
        None => ds,
    })
}

fn prepare(ds: &Dataset, split: Split, settings: &GridSettings) -> Result<Vec<PreparedImage>> {
    let ids = ds.split_ids(split);
    ensure!(!ids.is_empty(), "the {split:?} split of {} is empty", ds.name());
    info!(n = ids.len(), split = ?split, "segmenting images");
    let images = ids
        .par_iter()
        .map(|id| {
            ds.prepare(id, &settings.slic, settings.use_features)
                .with_context(|| format!("preparing {id}"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(images)
}

fn column_banks(images: &[PreparedImage], settings: &GridSettings) -> Result<Vec<ColumnBank>> {
    info!(
        n = images.len(),
        columns = settings.n_columns(),
        "building column banks"
    );
    images
        .par_iter()
        .map(|im| {
            build_column_bank(&im.sample, &im.seg, settings, im.features.as_ref())
                .with_context(|| format!("column bank for {}", im.id()))
        })
        .collect()
}

fn load_weights(path: &Path, settings: &GridSettings) -> Result<WeightVector> {
    let w = WeightVector::load(path).with_context(|| format!("loading weights {}", path.display()))?;
    let hash = settings.hash();
    ensure!(
        w.meta.settings_hash == hash,
        "weights in {} were trained with settings {}, the current settings hash to {hash}",
        path.display(),
        w.meta.settings_hash
    );
    Ok(w)
}

pub fn train(cfg: &RunConfig) -> Result<()> {
    let settings = settings_for(cfg)?;
    let ds = open_dataset(cfg)?;
    let images = prepare(&ds, Split::Train, &settings)?;
    let banks = column_banks(&images, &settings)?;
    let gts: Vec<DVector<f64>> = images
        .iter()
        .map(|im| im.node_gt().cloned())
        .collect::<Result<_, _>>()?;
    let weights = fit_weights(&banks, &gts)?.with_provenance(ds.name(), settings.hash());
    let loss = training_loss(&banks, &gts, &weights.w)?;
    info!(loss, n_columns = weights.w.len(), "fitted weights");

    let mut out = Outputs::new(&cfg.output_dir)?;
    weights.save(&out.path("weights.json")?)?;
    out.write_json(
        "training-report.json",
        &json!({
            "settings_hash": settings.hash(),
            "dataset": ds.name(),
            "n_samples": images.len(),
            "n_columns": weights.w.len(),
            "training_loss": loss,
            "weight_summary": weight_summary(&weights.w),
        }),
    )?;
    let maps = images
        .par_iter()
        .zip(&banks)
        .map(|(im, bank)| Ok(infer(bank, &weights, &im.seg)?))
        .collect::<Result<Vec<_>>>()?;
    for (im, map) in images.iter().zip(&maps) {
        map.save_png(&out.path(&format!("train-maps/{}.png", im.id()))?)?;
    }
    out.finish("train", cfg, &settings, Some(&ds), images.len())
}

fn detect_one(
    path: &Path,
    settings: &GridSettings,
    weights: &WeightVector,
    features_dir: Option<&Path>,
) -> Result<SaliencyMap> {
    let sample = load_sample(path, None)?;
    let seg = segment_with(&sample, &settings.slic)?;
    let features = if settings.use_features {
        let dir = features_dir.context("the weights use features; pass --features-dir or --dataset-root")?;
        let csv = dir.join(format!("{}.csv", sample.id));
        ensure!(csv.exists(), "feature file {} is missing", csv.display());
        Some(load_feature_bank(&csv, &seg)?)
    } else {
        None
    };
    let bank = build_column_bank(&sample, &seg, settings, features.as_ref())?;
    Ok(infer(&bank, weights, &seg)?)
}

pub fn detect(
    cfg: &RunConfig,
    weights: &Path,
    features_dir: Option<&Path>,
    out_dir: Option<PathBuf>,
    images: &[PathBuf],
) -> Result<()> {
    let settings = settings_for(cfg)?;
    let weights = load_weights(weights, &settings)?;
    let default_features = cfg.dataset_root.as_ref().map(|r| r.join("features"));
    let features_dir = features_dir.or(default_features.as_deref());
    let results: Vec<Result<SaliencyMap>> = images
        .par_iter()
        .map(|p| detect_one(p, &settings, &weights, features_dir))
        .collect();

    let out_dir = out_dir.unwrap_or_else(|| cfg.output_dir.join("maps"));
    let mut out = Outputs::new(&cfg.output_dir)?;
    std::fs::create_dir_all(&out_dir)?;
    let mut failures = 0;
    for (path, result) in images.iter().zip(results) {
        match result {
            Ok(map) => {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let target = out_dir.join(format!("{stem}.png"));
                map.save_png(&target)?;
                if let Ok(rel) = target.strip_prefix(&cfg.output_dir) {
                    out.files.push(rel.to_string_lossy().into_owned());
                }
            }
            Err(e) => {
                error!(image = %path.display(), "{e:#}");
                failures += 1;
            }
        }
    }
    out.finish("detect", cfg, &settings, None, images.len() - failures)?;
    if failures > 0 {
        bail!("{failures} of {} images failed", images.len());
    }
    Ok(())
}

pub fn evaluate(cfg: &RunConfig, weights: &Path, split: Split) -> Result<()> {
    let settings = settings_for(cfg)?;
    let weights = load_weights(weights, &settings)?;
    let ds = open_dataset(cfg)?;
    let images = prepare(&ds, split, &settings)?;
    let banks = column_banks(&images, &settings)?;
    let maps = images
        .par_iter()
        .zip(&banks)
        .map(|(im, bank)| Ok(infer(bank, &weights, &im.seg)?))
        .collect::<Result<Vec<_>>>()?;
    let gts = images.iter().map(|im| im.mask()).collect::<Result<Vec<_>, _>>()?;
    let (report, pr) = evaluate_maps(&maps, &gts)?;
    let roc = roc_curve(&maps, &gts)?;
    info!(f_measure = report.f_measure, auc = report.auc, "evaluated");

    let mut out = Outputs::new(&cfg.output_dir)?;
    out.write_json(
        "metrics.json",
        &json!({
            "settings_hash": settings.hash(),
            "split": format!("{split:?}").to_lowercase(),
            "report": report,
        }),
    )?;
    out.write("pr.csv", pr.to_csv())?;
    out.write("roc.csv", roc.to_csv())?;
    out.finish("evaluate", cfg, &settings, Some(&ds), images.len())
}

pub fn promote(
    cfg: &RunConfig,
    method: Option<&str>,
    seedmap_dir: Option<PathBuf>,
    matrix: MatrixChoice,
    split: Split,
) -> Result<()> {
    let settings = settings_for(cfg)?;
    let ds = open_dataset(cfg)?;
    let dir = match (seedmap_dir, method) {
        (Some(d), _) => d,
        (None, Some(m)) => ds.root().join("seedmaps").join(m),
        (None, None) => bail!("pass --method or --seedmap-dir"),
    };
    let images = prepare(&ds, split, &settings)?;
    let seed_maps = images
        .iter()
        .map(|im| {
            let p = dir.join(format!("{}.png", im.id()));
            load_gray(&p).with_context(|| format!("seed map {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let result = run_promotion(&images, &seed_maps, matrix, &settings)?;
    info!(
        before = result.before_report.f_measure,
        after = result.after_report.f_measure,
        matrix = %matrix,
        "promotion"
    );

    let mut out = Outputs::new(&cfg.output_dir)?;
    out.write(&format!("promote-{matrix}-before.csv"), result.before.to_csv())?;
    out.write(&format!("promote-{matrix}-after.csv"), result.after.to_csv())?;
    out.write_json(
        &format!("promote-{matrix}.json"),
        &json!({
            "settings_hash": settings.hash(),
            "matrix": matrix.name(),
            "seed_maps": dir.display().to_string(),
            "before": result.before_report,
            "after": result.after_report,
        }),
    )?;
    out.finish("promote", cfg, &settings, Some(&ds), images.len())
}

pub fn cose(cfg: &RunConfig, matrix: MatrixChoice, bin_threshold: f64, split: Split) -> Result<()> {
    let settings = settings_for(cfg)?;
    let ds = open_dataset(cfg)?;
    let images = prepare(&ds, split, &settings)?;
    let curve = run_cose(&images, matrix, &settings, bin_threshold)?;
    info!(at_100 = curve.y_at(100.0), n = curve.n_samples_averaged, matrix = %matrix, "cose");
    let mut out = Outputs::new(&cfg.output_dir)?;
    out.write(&format!("cose-{matrix}.csv"), curve.to_csv())?;
    out.finish("cose", cfg, &settings, Some(&ds), images.len())
}

pub fn ablate(cfg: &RunConfig) -> Result<()> {
    let settings = settings_for(cfg)?;
    let ds = open_dataset(cfg)?;
    let train = prepare(&ds, Split::Train, &settings)?;
    let test = prepare(&ds, Split::Test, &settings)?;
    let report = run_ablation(&train, &test, &settings)?;

    let mut out = Outputs::new(&cfg.output_dir)?;
    let mut summary = Vec::new();
    for stage in &report.stages {
        info!(stage = %stage.stage, f_measure = stage.report.f_measure, "ablation");
        out.write(&format!("ablation-{}.csv", stage.stage), stage.pr.to_csv())?;
        summary.push(json!({
            "stage": stage.stage,
            "n_columns": stage.n_columns,
            "training_loss": stage.training_loss,
            "report": stage.report,
        }));
    }
    out.write_json(
        "ablation.json",
        &json!({
            "settings_hash": settings.hash(),
            "stages": summary,
            "skipped": report.skipped,
        }),
    )?;
    out.finish("ablate", cfg, &settings, Some(&ds), train.len() + test.len())
}

pub fn synth(cfg: &RunConfig, n_images: usize, width: u32, height: u32) -> Result<()> {
    let settings = settings_for(cfg)?;
    let root = cfg.dataset_root()?;
    let synth = SynthConfig {
        n_images,
        width,
        height,
        seed: cfg.seed_of_rng,
        slic: settings.slic,
        ..SynthConfig::default()
    };
    let ds = generate_dataset(root, &synth)?;
    info!(root = %root.display(), n = ds.len(), "generated dataset");
    Ok(())
}
