//! Column banks, closed-form weight fitting and inference.
//!
//! Every (matrix, seed) cell of the settings grid contributes one normalized
//! saliency column per image. Stacking the columns gives the bank `H`, and a
//! global weight vector `w` maps it to node saliency `H w`.

use std::path::Path;

use image::GrayImage;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use crate::error::{Error, Result};
use crate::features::{feature_diffusion_apply, FeatureDiffusion};
use crate::graph::{build_graph_with, DistanceMode, DAMPING};
use crate::ingest::{BinaryMask, ColorSpace, FeatureBank, ImageSample};
use crate::refine::{normalize_for_seed, refine_matrix, RefineParams, RefinedDiffusion};
use crate::seeds::{absorbed_time_seed, gaussian_seed, SeedKind, SeedVector, DEFAULT_GAUSSIAN_VARIANCES};
use crate::spectral::{decompose_with, EigvecNorm, SpectralDecomposition};
use crate::superpixel::{SlicParams, SuperpixelSegmentation};

pub const DEFAULT_SIGMA2: [f64; 11] = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0, 16.0, 17.0, 18.0, 19.0, 20.0];

/// Which operator a column was diffused through.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MatrixSource {
    Spectral { space: ColorSpace, sigma2: f64 },
    Features,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnLabel {
    pub matrix_id: usize,
    pub seed_id: usize,
    pub matrix: MatrixSource,
    pub seed: SeedKind,
}

/// Everything that decides the column layout and the column values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSettings {
    pub slic: SlicParams,
    pub spaces: Vec<ColorSpace>,
    pub sigma2_list: Vec<f64>,
    pub gaussian_variances: Vec<f64>,
    pub absorbed_time: bool,
    pub refine: RefineParams,
    pub distance_mode: DistanceMode,
    pub eigvec_norm: EigvecNorm,
    pub use_features: bool,
}

impl Default for GridSettings {
    fn default() -> Self {
        Self {
            slic: SlicParams::default(),
            spaces: ColorSpace::ALL.to_vec(),
            sigma2_list: DEFAULT_SIGMA2.to_vec(),
            gaussian_variances: DEFAULT_GAUSSIAN_VARIANCES.to_vec(),
            absorbed_time: true,
            refine: RefineParams::default(),
            distance_mode: DistanceMode::Euclidean,
            eigvec_norm: EigvecNorm::Euclidean,
            use_features: false,
        }
    }
}

impl GridSettings {
    pub fn validate(&self) -> Result<()> {
        if self.spaces.is_empty() || self.sigma2_list.is_empty() {
            return Err(Error::InvalidParameter(
                "the grid needs at least one color space and one sigma2".into(),
            ));
        }
        if self.gaussian_variances.is_empty() && !self.absorbed_time {
            return Err(Error::InvalidParameter("the grid needs at least one seed".into()));
        }
        if let Some(s) = self.sigma2_list.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::InvalidParameter(format!("sigma2 must be positive, got {s}")));
        }
        if let Some(v) = self.gaussian_variances.iter().find(|v| !(**v > 0.0)) {
            return Err(Error::InvalidParameter(format!("variance must be positive, got {v}")));
        }
        Ok(())
    }

    /// Spectral matrices in id order: color space major, sigma2 minor.
    pub fn matrices(&self) -> Vec<(ColorSpace, f64)> {
        self.spaces
            .iter()
            .flat_map(|&space| self.sigma2_list.iter().map(move |&s| (space, s)))
            .collect()
    }

    /// Seeds in id order: Gaussian variances, then absorbed time.
    pub fn seed_kinds(&self) -> Vec<SeedKind> {
        let mut kinds: Vec<SeedKind> = self
            .gaussian_variances
            .iter()
            .map(|&v| SeedKind::GaussianCenter(v))
            .collect();
        if self.absorbed_time {
            kinds.push(SeedKind::AbsorbedTime);
        }
        kinds
    }

    /// Lexicographic (matrix_id, seed_id) layout.
    pub fn layout(&self) -> Vec<ColumnLabel> {
        let mut sources: Vec<MatrixSource> = self
            .matrices()
            .into_iter()
            .map(|(space, sigma2)| MatrixSource::Spectral { space, sigma2 })
            .collect();
        if self.use_features {
            sources.push(MatrixSource::Features);
        }
        let seeds = self.seed_kinds();
        sources
            .iter()
            .enumerate()
            .flat_map(|(matrix_id, &matrix)| {
                seeds.iter().enumerate().map(move |(seed_id, seed)| ColumnLabel {
                    matrix_id,
                    seed_id,
                    matrix,
                    seed: seed.clone(),
                })
            })
            .collect()
    }

    pub fn n_columns(&self) -> usize {
        (self.matrices().len() + usize::from(self.use_features)) * self.seed_kinds().len()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("settings serialize");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Per-image matrix `H`: N nodes by C columns.
#[derive(Debug, Clone)]
pub struct ColumnBank {
    pub columns: DMatrix<f64>,
    pub labels: Vec<ColumnLabel>,
}

impl ColumnBank {
    pub fn n_nodes(&self) -> usize {
        self.columns.nrows()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.ncols()
    }

    /// Picks the columns of `layout` out of a larger bank, matching on
    /// matrix and seed identity.
    pub fn select(&self, layout: &[ColumnLabel]) -> Result<ColumnBank> {
        let idx = layout
            .iter()
            .map(|want| {
                self.labels
                    .iter()
                    .position(|have| have.matrix == want.matrix && have.seed == want.seed)
                    .ok_or_else(|| {
                        Error::LayoutMismatch(format!("bank has no column for {:?} / {:?}", want.matrix, want.seed))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ColumnBank {
            columns: self.columns.select_columns(&idx),
            labels: layout.to_vec(),
        })
    }
}

/// Errors that stand for a single bad grid cell rather than bad input.
fn is_cell_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NumericalFailure(_) | Error::SingularEigenvalue { .. } | Error::DegenerateGraph(_) | Error::EmptySeed
    )
}

/// Eigendecomposition of `D^-1 (D - 0.99 W)` for one (space, sigma2) graph.
pub fn decompose_cell(
    seg: &SuperpixelSegmentation,
    space: ColorSpace,
    sigma2: f64,
    mode: DistanceMode,
    norm: EigvecNorm,
) -> Result<SpectralDecomposition> {
    let g = build_graph_with(seg, space, sigma2, mode)?;
    decompose_with(&g.damped_rw_laplacian(DAMPING), Some(g.degree()), norm)
}

pub fn refine_cell(
    seg: &SuperpixelSegmentation,
    space: ColorSpace,
    sigma2: f64,
    settings: &GridSettings,
) -> Result<RefinedDiffusion> {
    let dec = decompose_cell(seg, space, sigma2, settings.distance_mode, settings.eigvec_norm)?;
    Ok(refine_matrix(&dec, &settings.refine)?.with_source(space, sigma2))
}

fn fallback_column(n: usize, id: &str, label: &ColumnLabel, e: &Error) -> DVector<f64> {
    warn!(sample = id, matrix = label.matrix_id, seed = label.seed_id, error = %e, "cell failed, using a flat column");
    DVector::from_element(n, 0.5)
}

/// Diffuses every seed through every matrix of the grid.
pub fn build_column_bank(
    sample: &ImageSample,
    seg: &SuperpixelSegmentation,
    settings: &GridSettings,
    feature_bank: Option<&FeatureBank>,
) -> Result<ColumnBank> {
    settings.validate()?;
    if settings.use_features && feature_bank.is_none() {
        return Err(Error::FeatureMissing(sample.id.clone()));
    }
    let n = seg.n_nodes();
    let labels = settings.layout();
    let gaussians = settings
        .gaussian_variances
        .iter()
        .map(|&v| gaussian_seed(seg, v))
        .collect::<Result<Vec<_>>>()?;
    let n_seeds = settings.seed_kinds().len();

    let per_matrix: Vec<(Vec<DVector<f64>>, Option<SeedVector>)> = settings
        .matrices()
        .par_iter()
        .enumerate()
        .map(|(m, &(space, sigma2))| {
            let cell_labels = &labels[m * n_seeds..(m + 1) * n_seeds];
            let refined = match refine_cell(seg, space, sigma2, settings) {
                Ok(r) => r,
                Err(e) if is_cell_failure(&e) => {
                    let cols = cell_labels
                        .iter()
                        .map(|l| fallback_column(n, &sample.id, l, &e))
                        .collect();
                    return Ok((cols, None));
                }
                Err(e) => return Err(e),
            };
            let absorbed = if settings.absorbed_time {
                Some(absorbed_time_seed(&refined, seg.is_border()))
            } else {
                None
            };
            let mut cols = Vec::with_capacity(n_seeds);
            for (label, g) in cell_labels.iter().zip(&gaussians) {
                cols.push(normalized_or_flat(&refined, Ok(g), n, &sample.id, label)?);
            }
            if let Some(a) = &absorbed {
                cols.push(normalized_or_flat(
                    &refined,
                    a.as_ref(),
                    n,
                    &sample.id,
                    &cell_labels[n_seeds - 1],
                )?);
            }
            Ok((cols, absorbed.and_then(|a| a.ok())))
        })
        .collect::<Result<_>>()?;

    let mut columns: Vec<DVector<f64>> = Vec::with_capacity(labels.len());
    // The feature block borrows the first matrix's absorbed-time seed.
    let first_absorbed = per_matrix.first().and_then(|(_, a)| a.clone());
    for (cols, _) in per_matrix {
        columns.extend(cols);
    }
    if settings.use_features {
        let bank = feature_bank.expect("checked above");
        let fd = FeatureDiffusion::from_bank(bank)?;
        let offset = columns.len();
        for (seed_id, label) in labels[offset..].iter().enumerate() {
            let seed = if seed_id < gaussians.len() {
                Some(&gaussians[seed_id])
            } else {
                first_absorbed.as_ref()
            };
            let col = match seed {
                Some(s) => match feature_diffusion_apply(&fd, &s.values) {
                    Ok(y) => y,
                    Err(e) if is_cell_failure(&e) => fallback_column(n, &sample.id, label, &e),
                    Err(e) => return Err(e),
                },
                None => fallback_column(
                    n,
                    &sample.id,
                    label,
                    &Error::DegenerateGraph("no absorbed-time seed".into()),
                ),
            };
            columns.push(col);
        }
    }
    Ok(ColumnBank {
        columns: DMatrix::from_columns(&columns),
        labels,
    })
}

fn normalized_or_flat(
    refined: &RefinedDiffusion,
    seed: std::result::Result<&SeedVector, &Error>,
    n: usize,
    id: &str,
    label: &ColumnLabel,
) -> Result<DVector<f64>> {
    let out = match seed {
        Ok(s) => normalize_for_seed(refined, &s.values).map(|(_, y)| y),
        Err(e) => Err(clone_cell_error(e)),
    };
    match out {
        Ok(y) => Ok(y),
        Err(e) if is_cell_failure(&e) => Ok(fallback_column(n, id, label, &e)),
        Err(e) => Err(e),
    }
}

fn clone_cell_error(e: &Error) -> Error {
    match e {
        Error::NumericalFailure(s) => Error::NumericalFailure(s.clone()),
        Error::SingularEigenvalue { index, value } => Error::SingularEigenvalue {
            index: *index,
            value: *value,
        },
        Error::DegenerateGraph(s) => Error::DegenerateGraph(s.clone()),
        Error::EmptySeed => Error::EmptySeed,
        other => Error::InvalidParameter(other.to_string()),
    }
}

/// 1 for nodes whose pixels are at least half foreground.
pub fn node_ground_truth(seg: &SuperpixelSegmentation, mask: &BinaryMask) -> Result<DVector<f64>> {
    if mask.width() != seg.width() || mask.height() != seg.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, segmentation is {}x{}",
            mask.width(),
            mask.height(),
            seg.width(),
            seg.height()
        )));
    }
    let pixel: Vec<f64> = mask.data().iter().map(|&v| f64::from(v)).collect();
    let frac = seg.node_average(&pixel);
    Ok(DVector::from_iterator(
        frac.len(),
        frac.iter().map(|&f| if f >= 0.5 { 1.0 } else { 0.0 }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub dataset_id: String,
    /// Number of training images.
    pub n_samples: usize,
    pub n_columns: usize,
    pub settings_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub meta: TrainingMeta,
    pub layout: Vec<ColumnLabel>,
}

impl WeightVector {
    pub fn with_provenance(mut self, dataset_id: impl Into<String>, settings_hash: impl Into<String>) -> Self {
        self.meta.dataset_id = dataset_id.into();
        self.meta.settings_hash = settings_hash.into();
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let wv: WeightVector = serde_json::from_slice(&std::fs::read(path)?)?;
        if wv.w.len() != wv.layout.len() || wv.w.len() != wv.meta.n_columns {
            return Err(Error::LayoutMismatch(format!(
                "{} weights for {} layout columns",
                wv.w.len(),
                wv.layout.len()
            )));
        }
        if wv.w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse("weight file holds non-finite values".into()));
        }
        Ok(wv)
    }

    fn check_layout(&self, bank: &ColumnBank) -> Result<()> {
        if bank.labels != self.layout {
            return Err(Error::LayoutMismatch(format!(
                "bank has {} columns, weights expect {}",
                bank.n_columns(),
                self.w.len()
            )));
        }
        Ok(())
    }
}

fn check_training_set(banks: &[ColumnBank], gts: &[DVector<f64>]) -> Result<()> {
    if banks.is_empty() {
        return Err(Error::InsufficientData("no training samples".into()));
    }
    if banks.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} banks but {} ground truths",
            banks.len(),
            gts.len()
        )));
    }
    let layout = &banks[0].labels;
    for (i, (bank, gt)) in banks.iter().zip(gts).enumerate() {
        if &bank.labels != layout || bank.columns.ncols() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "sample {i} has a different column layout"
            )));
        }
        if gt.len() != bank.n_nodes() {
            return Err(Error::ShapeMismatch(format!(
                "sample {i}: {} ground-truth entries for {} nodes",
                gt.len(),
                bank.n_nodes()
            )));
        }
    }
    Ok(())
}

/// Solves `(sum H^T H + eps I) w = sum H^T y` with `eps = 1e-8 trace / C`.
pub fn fit_weights(banks: &[ColumnBank], gts: &[DVector<f64>]) -> Result<WeightVector> {
    check_training_set(banks, gts)?;
    let c = banks[0].n_columns();
    let mut hth = DMatrix::<f64>::zeros(c, c);
    let mut hty = DVector::<f64>::zeros(c);
    for (bank, gt) in banks.iter().zip(gts) {
        hth.gemm_tr(1.0, &bank.columns, &bank.columns, 1.0);
        hty.gemv_tr(1.0, &bank.columns, gt, 1.0);
    }
    let trace = hth.trace();
    let eps = if trace > 0.0 { 1e-8 * trace / c as f64 } else { 1e-8 };
    for i in 0..c {
        hth[(i, i)] += eps;
    }
    let chol = hth
        .cholesky()
        .ok_or_else(|| Error::NumericalFailure("normal equations are not positive definite".into()))?;
    let w = chol.solve(&hty);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(
            "weight solve produced non-finite values".into(),
        ));
    }
    Ok(WeightVector {
        w: w.as_slice().to_vec(),
        meta: TrainingMeta {
            dataset_id: String::new(),
            n_samples: banks.len(),
            n_columns: c,
            settings_hash: String::new(),
        },
        layout: banks[0].labels.clone(),
    })
}

/// `J(w) = sum_i ||H(i) w - y(i)||^2`.
pub fn training_loss(banks: &[ColumnBank], gts: &[DVector<f64>], w: &[f64]) -> Result<f64> {
    check_training_set(banks, gts)?;
    if w.len() != banks[0].n_columns() {
        return Err(Error::LayoutMismatch(format!(
            "{} weights for {} columns",
            w.len(),
            banks[0].n_columns()
        )));
    }
    let w = DVector::from_column_slice(w);
    Ok(banks
        .iter()
        .zip(gts)
        .map(|(bank, gt)| (&bank.columns * &w - gt).norm_squared())
        .sum())
}

/// `H w` clamped to [0, 1].
pub fn predict_nodes(bank: &ColumnBank, w: &WeightVector) -> Result<DVector<f64>> {
    w.check_layout(bank)?;
    let wv = DVector::from_column_slice(&w.w);
    Ok((&bank.columns * wv).map(|v| v.clamp(0.0, 1.0)))
}

pub fn infer(bank: &ColumnBank, w: &WeightVector, seg: &SuperpixelSegmentation) -> Result<SaliencyMap> {
    let nodes = predict_nodes(bank, w)?;
    if nodes.len() != seg.n_nodes() {
        return Err(Error::ShapeMismatch(format!(
            "{} node values for {} nodes",
            nodes.len(),
            seg.n_nodes()
        )));
    }
    Ok(SaliencyMap::from_nodes(seg, nodes.as_slice()))
}

/// Pixel saliency in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl SaliencyMap {
    pub fn from_nodes(seg: &SuperpixelSegmentation, node_values: &[f64]) -> Self {
        Self {
            width: seg.width(),
            height: seg.height(),
            data: seg.paint(node_values),
        }
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data: img.as_raw().iter().map(|&v| f64::from(v) / 255.0).collect(),
        }
    }

    /// `round(255 v)` per pixel.
    pub fn to_levels(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.to_levels()).expect("buffer matches size")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|e| Error::decode(path, e))
    }
}

/// Summary of `|w|` for training reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub min_abs: f64,
    pub max_abs: f64,
    pub mean_abs: f64,
    /// Column with the largest `|w|`.
    pub argmax_abs: usize,
}

pub fn weight_summary(w: &[f64]) -> Option<WeightSummary> {
    if w.is_empty() {
        return None;
    }
    let abs: Vec<f64> = w.iter().map(|v| v.abs()).collect();
    let argmax_abs = (0..abs.len()).fold(0, |b, i| if abs[i] > abs[b] { i } else { b });
    Some(WeightSummary {
        min_abs: abs.iter().cloned().fold(f64::INFINITY, f64::min),
        max_abs: abs[argmax_abs],
        mean_abs: abs.iter().sum::<f64>() / abs.len() as f64,
        argmax_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::superpixel::segment;
    use image::{Rgb, RgbImage};

    fn bank(cols: &[&[f64]]) -> ColumnBank {
        let settings = GridSettings {
            spaces: vec![ColorSpace::Lab],
            sigma2_list: (0..cols.len()).map(|i| 10.0 + i as f64).collect(),
            gaussian_variances: vec![1.0],
            absorbed_time: false,
            ..GridSettings::default()
        };
        let columns = DMatrix::from_columns(&cols.iter().map(|c| DVector::from_column_slice(c)).collect::<Vec<_>>());
        ColumnBank {
            columns,
            labels: settings.layout(),
        }
    }

    fn sample() -> ImageSample {
        let img = RgbImage::from_fn(24, 24, |x, y| {
            if (6..18).contains(&x) && (6..18).contains(&y) {
                Rgb([220, 40, 30])
            } else {
                Rgb([30, 90, 160])
            }
        });
        ImageSample::new("sq", img, None).unwrap()
    }

    #[test]
    fn default_grid_has_132_columns_and_136_with_features() {
        let mut s = GridSettings::default();
        assert_eq!(s.n_columns(), 132);
        assert_eq!(s.layout().len(), 132);
        s.use_features = true;
        assert_eq!(s.n_columns(), 136);
        let layout = s.layout();
        assert_eq!(layout.len(), 136);
        assert_eq!(layout[132].matrix, MatrixSource::Features);
        assert!(layout
            .windows(2)
            .all(|p| (p[0].matrix_id, p[0].seed_id) < (p[1].matrix_id, p[1].seed_id)));
    }

    #[test]
    fn single_cell_bank_is_the_normalized_diffusion() {
        let s = sample();
        let seg = segment(&s, 16, 10.0).unwrap();
        let settings = GridSettings {
            spaces: vec![ColorSpace::Lab],
            sigma2_list: vec![10.0],
            gaussian_variances: vec![1.0],
            absorbed_time: false,
            ..GridSettings::default()
        };
        let b = build_column_bank(&s, &seg, &settings, None).unwrap();
        assert_eq!(b.n_columns(), 1);
        let refined = refine_cell(&seg, ColorSpace::Lab, 10.0, &settings).unwrap();
        let (_, y) = normalize_for_seed(&refined, &gaussian_seed(&seg, 1.0).unwrap().values).unwrap();
        assert_eq!(b.columns.column(0).as_slice(), y.as_slice());
    }

    #[test]
    fn features_required_when_enabled() {
        let s = sample();
        let seg = segment(&s, 16, 10.0).unwrap();
        let settings = GridSettings {
            use_features: true,
            ..GridSettings::default()
        };
        assert!(matches!(
            build_column_bank(&s, &seg, &settings, None),
            Err(Error::FeatureMissing(_))
        ));
    }

    #[test]
    fn perfect_single_column_gets_unit_weight() {
        let gt = [1.0, 0.0, 1.0, 0.0, 0.0];
        let w = fit_weights(&[bank(&[&gt])], &[DVector::from_column_slice(&gt)]).unwrap();
        assert!((w.w[0] - 1.0).abs() < 1e-7);
    }

    #[test]
    fn no_samples_is_insufficient() {
        assert!(matches!(fit_weights(&[], &[]), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn layout_mismatch_is_reported() {
        let a = bank(&[&[0.0, 1.0]]);
        let b = bank(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let gts = vec![DVector::from_element(2, 1.0); 2];
        assert!(matches!(
            fit_weights(&[a, b.clone()], &gts),
            Err(Error::LayoutMismatch(_))
        ));
        let w = fit_weights(&[b], &gts[..1]).unwrap();
        assert!(matches!(
            predict_nodes(&bank(&[&[0.0, 1.0]]), &w),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn inference_arithmetic() {
        let b = bank(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let mut w = fit_weights(&[b.clone()], &[DVector::from_element(2, 0.5)]).unwrap();
        w.w = vec![0.5, 0.5];
        assert_eq!(predict_nodes(&b, &w).unwrap().as_slice(), &[0.5, 0.5]);
        w.w = vec![0.0, 0.0];
        assert_eq!(predict_nodes(&b, &w).unwrap().as_slice(), &[0.0, 0.0]);
        w.w = vec![0.0, 1.0];
        assert_eq!(predict_nodes(&b, &w).unwrap().as_slice(), &[1.0, 0.0]);
        w.w = vec![3.0, -2.0];
        assert_eq!(predict_nodes(&b, &w).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn node_gt_is_majority_vote() {
        let s = ImageSample::new("m", RgbImage::new(4, 2), None).unwrap();
        let seg = SuperpixelSegmentation::from_labels(&s, vec![0, 0, 1, 1, 0, 0, 1, 1]).unwrap();
        // Left node half foreground, right node a quarter.
        let mask = BinaryMask::new(4, 2, vec![1, 1, 0, 0, 0, 0, 1, 0]).unwrap();
        assert_eq!(node_ground_truth(&seg, &mask).unwrap().as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn weight_file_round_trips() {
        let b = bank(&[&[0.1, 0.7, 0.3], &[0.9, 0.2, 0.4]]);
        let w = fit_weights(&[b], &[DVector::from_column_slice(&[1.0, 0.0, 1.0])])
            .unwrap()
            .with_provenance("toy", "abc");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.json");
        w.save(&p).unwrap();
        assert_eq!(WeightVector::load(&p).unwrap(), w);
    }

    #[test]
    fn settings_hash_tracks_changes() {
        let a = GridSettings::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.refine.var_threshold = 0.1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn select_picks_nested_columns() {
        let s = sample();
        let seg = segment(&s, 16, 10.0).unwrap();
        let full = GridSettings {
            sigma2_list: vec![10.0, 11.0],
            ..GridSettings::default()
        };
        let sub = GridSettings {
            spaces: vec![ColorSpace::Rgb],
            sigma2_list: vec![11.0],
            gaussian_variances: vec![2.0],
            ..GridSettings::default()
        };
        let big = build_column_bank(&s, &seg, &full, None).unwrap();
        let small = build_column_bank(&s, &seg, &sub, None).unwrap();
        let picked = big.select(&sub.layout()).unwrap();
        assert_eq!(picked.labels, small.labels);
        assert_eq!(picked.columns, small.columns);
    }

    #[test]
    fn saliency_map_quantizes() {
        let m = SaliencyMap {
            width: 3,
            height: 1,
            data: vec![0.0, 0.5, 1.0],
        };
        assert_eq!(m.to_levels(), vec![0, 128, 255]);
    }
}
