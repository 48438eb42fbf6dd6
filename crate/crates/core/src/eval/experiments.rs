//! Dataset-level experiments: saliency promotion, COSE and the staged
//! ablation.

use image::GrayImage;
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::dataset::PreparedImage;
use crate::error::{Error, Result};
use crate::eval::metrics::{evaluate_maps, CurveSeries, MetricReport};
use crate::eval::omp::{adapted_omp, cose_curve};
use crate::graph::{build_graph_with, DAMPING};
use crate::ingest::{rescale_unit, BinaryMask, ColorSpace};
use crate::refine::{normalize_for_seed, refine_matrix, RefineParams, RefinedDiffusion};
use crate::seeds::{external_seed_from_map, gaussian_seed};
use crate::spectral::{diffusion_apply, SpectralDecomposition};
use crate::train::{
    build_column_bank, decompose_cell, fit_weights, infer, refine_cell, training_loss, ColumnBank, GridSettings,
    SaliencyMap,
};

/// Color space and scale of the single-matrix experiments.
pub const PROBE_SPACE: ColorSpace = ColorSpace::Lab;
pub const PROBE_SIGMA2: f64 = 10.0;
/// Gaussian seed variance of the single-seed ablation stages.
pub const ABLATION_VARIANCE: f64 = 1.0;
pub const STAGE_NAMES: [&str; 8] = ["S0", "S1", "S2", "S3", "S4", "S5", "S6", "S7"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixChoice {
    /// The refined, re-synthesized operator.
    Refined,
    /// `(D - 0.99 W)^-1`
    LTilde,
    /// `(D^-1 (D - 0.99 W))^-1`
    LRwTilde,
}

impl MatrixChoice {
    pub const ALL: [MatrixChoice; 3] = [MatrixChoice::Refined, MatrixChoice::LTilde, MatrixChoice::LRwTilde];

    pub fn name(self) -> &'static str {
        match self {
            MatrixChoice::Refined => "refined",
            MatrixChoice::LTilde => "l-tilde",
            MatrixChoice::LRwTilde => "l-rw-tilde",
        }
    }
}

impl std::str::FromStr for MatrixChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "refined" => Ok(MatrixChoice::Refined),
            "l-tilde" => Ok(MatrixChoice::LTilde),
            "l-rw-tilde" => Ok(MatrixChoice::LRwTilde),
            other => Err(Error::InvalidParameter(format!("unknown matrix {other}"))),
        }
    }
}

impl std::fmt::Display for MatrixChoice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn probe_refined(seg: &crate::superpixel::SuperpixelSegmentation, settings: &GridSettings) -> Result<RefinedDiffusion> {
    refine_cell(seg, PROBE_SPACE, PROBE_SIGMA2, settings)
}

/// Dense diffusion matrix for the chosen operator on the probe graph.
pub fn choice_dictionary(
    seg: &crate::superpixel::SuperpixelSegmentation,
    choice: MatrixChoice,
    settings: &GridSettings,
) -> Result<DMatrix<f64>> {
    if choice == MatrixChoice::Refined {
        return Ok(probe_refined(seg, settings)?.matrix());
    }
    let g = build_graph_with(seg, PROBE_SPACE, PROBE_SIGMA2, settings.distance_mode)?;
    let inverse = match choice {
        MatrixChoice::LTilde => g.damped_laplacian(DAMPING).cholesky().map(|c| c.inverse()),
        _ => g.damped_rw_laplacian(DAMPING).try_inverse(),
    };
    inverse.ok_or_else(|| Error::NumericalFailure(format!("{choice} is not invertible")))
}

/// Node saliency in [0, 1] from diffusing `seed` through the chosen operator.
/// The refined operator uses its own normalization; the baselines are
/// min-max rescaled.
pub fn choice_diffuse(
    seg: &crate::superpixel::SuperpixelSegmentation,
    choice: MatrixChoice,
    settings: &GridSettings,
    seed: &DVector<f64>,
) -> Result<DVector<f64>> {
    if choice == MatrixChoice::Refined {
        let refined = probe_refined(seg, settings)?;
        return normalize_for_seed(&refined, seed).map(|(_, y)| y);
    }
    let mut y = choice_dictionary(seg, choice, settings)? * seed;
    rescale_unit(y.as_mut_slice());
    Ok(y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromotionResult {
    pub choice: MatrixChoice,
    pub before: CurveSeries,
    pub after: CurveSeries,
    pub before_report: MetricReport,
    pub after_report: MetricReport,
}

fn masks(images: &[PreparedImage]) -> Result<Vec<&BinaryMask>> {
    images.iter().map(|im| im.mask()).collect()
}

/// Pixel metrics of raw external maps against the same maps diffused
/// through `choice`.
pub fn promote(
    images: &[PreparedImage],
    seed_maps: &[GrayImage],
    choice: MatrixChoice,
    settings: &GridSettings,
) -> Result<PromotionResult> {
    if images.len() != seed_maps.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images but {} seed maps",
            images.len(),
            seed_maps.len()
        )));
    }
    let gts = masks(images)?;
    let after: Vec<SaliencyMap> = images
        .par_iter()
        .zip(seed_maps)
        .map(|(im, map)| {
            let nodes = match external_seed_from_map(map, &im.seg, "external") {
                Ok(seed) => choice_diffuse(&im.seg, choice, settings, &seed.values)?,
                Err(Error::EmptySeed) => DVector::zeros(im.seg.n_nodes()),
                Err(e) => return Err(e),
            };
            Ok(SaliencyMap::from_nodes(&im.seg, nodes.as_slice()))
        })
        .collect::<Result<_>>()?;
    let before: Vec<SaliencyMap> = seed_maps.iter().map(SaliencyMap::from_gray).collect();
    let (before_report, before_pr) = evaluate_maps(&before, &gts)?;
    let (after_report, after_pr) = evaluate_maps(&after, &gts)?;
    Ok(PromotionResult {
        choice,
        before: before_pr,
        after: after_pr,
        before_report,
        after_report,
    })
}

/// Mean COSE curve of the chosen operator. Images without foreground nodes
/// are skipped.
pub fn cose(
    images: &[PreparedImage],
    choice: MatrixChoice,
    settings: &GridSettings,
    bin_threshold: f64,
) -> Result<CurveSeries> {
    let traces: Vec<Option<Vec<(f64, f64)>>> = images
        .par_iter()
        .map(|im| {
            let gt = im.node_gt()?;
            let dict = choice_dictionary(&im.seg, choice, settings)?;
            match adapted_omp(&dict, gt, 0.0, bin_threshold) {
                Ok(r) => Ok(Some(r.trace)),
                Err(Error::EmptyForeground) => {
                    warn!(sample = im.id(), "no foreground nodes, skipped");
                    Ok(None)
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let traces: Vec<Vec<(f64, f64)>> = traces.into_iter().flatten().collect();
    cose_curve(&traces)
}

/// Node output of the single-matrix stages S0 to S3 on one decomposition.
///
/// S0 diffuses through the full spectrum and min-max rescales. S1 drops the
/// constant eigenvector and normalizes through it instead. S2 also cuts at
/// the eigengap, and S3 adds the discriminability filter.
pub fn single_matrix_stage(
    dec: &SpectralDecomposition,
    stage: usize,
    seed: &DVector<f64>,
    refine: &RefineParams,
) -> Result<DVector<f64>> {
    let normalized = |r: RefinedDiffusion| normalize_for_seed(&r, seed).map(|(_, y)| y);
    match stage {
        0 => {
            let mut y = diffusion_apply(dec, seed)?;
            rescale_unit(y.as_mut_slice());
            Ok(y)
        }
        1 => {
            let keep: Vec<usize> = (0..dec.n()).filter(|&l| l != dec.constant_index()).collect();
            if keep.is_empty() {
                return Err(Error::DegenerateGraph("only the constant eigenvector exists".into()));
            }
            let u = dec.eigenvectors().select_columns(&keep);
            let lambda = dec.eigenvalues().select_rows(&keep);
            normalized(RefinedDiffusion::from_parts(u, lambda)?)
        }
        2 => {
            let params = RefineParams {
                var_threshold: 0.0,
                ..*refine
            };
            normalized(refine_matrix(dec, &params)?)
        }
        3 => normalized(refine_matrix(dec, refine)?),
        _ => Err(Error::InvalidParameter(format!(
            "S{stage} is not a single-matrix stage"
        ))),
    }
}

/// Grid settings of the trained stages S4 to S7, each a column superset of
/// the previous one.
pub fn trained_stage_settings(settings: &GridSettings) -> Result<[GridSettings; 4]> {
    if !settings.spaces.contains(&PROBE_SPACE)
        || !settings.sigma2_list.contains(&PROBE_SIGMA2)
        || !settings.gaussian_variances.contains(&ABLATION_VARIANCE)
    {
        return Err(Error::InvalidParameter(format!(
            "the ablation grid must contain {PROBE_SPACE}, sigma2 {PROBE_SIGMA2} and variance {ABLATION_VARIANCE}"
        )));
    }
    let s4 = GridSettings {
        sigma2_list: vec![PROBE_SIGMA2],
        gaussian_variances: vec![ABLATION_VARIANCE],
        absorbed_time: false,
        use_features: false,
        ..settings.clone()
    };
    let s5 = GridSettings {
        sigma2_list: settings.sigma2_list.clone(),
        ..s4.clone()
    };
    let s6 = GridSettings {
        gaussian_variances: settings.gaussian_variances.clone(),
        absorbed_time: settings.absorbed_time,
        ..s5.clone()
    };
    let s7 = GridSettings {
        use_features: true,
        ..s6.clone()
    };
    Ok([s4, s5, s6, s7])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stage: String,
    pub report: MetricReport,
    pub pr: CurveSeries,
    /// Training loss for the learned stages.
    pub training_loss: Option<f64>,
    pub n_columns: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub stages: Vec<StageResult>,
    pub skipped: Vec<String>,
}

impl AblationReport {
    pub fn stage(&self, name: &str) -> Option<&StageResult> {
        self.stages.iter().find(|s| s.stage == name)
    }
}

fn full_banks(images: &[PreparedImage], settings: &GridSettings) -> Result<Vec<ColumnBank>> {
    images
        .par_iter()
        .map(|im| build_column_bank(&im.sample, &im.seg, settings, im.features.as_ref()))
        .collect()
}

/// Runs S0 to S7. S0 to S3 need no training and are scored on `test`
/// directly; S4 to S7 are fitted on `train` and scored on `test`. S7 is
/// skipped with a warning when any image lacks features.
pub fn ablate(train: &[PreparedImage], test: &[PreparedImage], settings: &GridSettings) -> Result<AblationReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::InsufficientData(
            "ablation needs training and test images".into(),
        ));
    }
    let stage_settings = trained_stage_settings(settings)?;
    let have_features = train.iter().chain(test).all(|im| im.features.is_some());
    let mut skipped = Vec::new();
    if !have_features {
        warn!("feature files missing, S7 skipped");
        skipped.push("S7".to_string());
    }
    let full = GridSettings {
        use_features: have_features,
        ..stage_settings[2].clone()
    };
    let test_gts = masks(test)?;
    let mut stages = Vec::new();

    let single: Vec<[DVector<f64>; 4]> = test
        .par_iter()
        .map(|im| {
            let n = im.seg.n_nodes();
            let seed = gaussian_seed(&im.seg, ABLATION_VARIANCE)?.values;
            let dec = decompose_cell(
                &im.seg,
                PROBE_SPACE,
                PROBE_SIGMA2,
                settings.distance_mode,
                settings.eigvec_norm,
            );
            let mut outs: [DVector<f64>; 4] = std::array::from_fn(|_| DVector::from_element(n, 0.5));
            for (stage, out) in outs.iter_mut().enumerate() {
                let y = match &dec {
                    Ok(d) => single_matrix_stage(d, stage, &seed, &settings.refine),
                    Err(e) => Err(Error::NumericalFailure(e.to_string())),
                };
                match y {
                    Ok(y) => *out = y,
                    Err(
                        e @ (Error::NumericalFailure(_) | Error::SingularEigenvalue { .. } | Error::DegenerateGraph(_)),
                    ) => {
                        warn!(sample = im.id(), stage, error = %e, "stage failed, using a flat map");
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok(outs)
        })
        .collect::<Result<_>>()?;
    for stage in 0..4 {
        let maps: Vec<SaliencyMap> = test
            .iter()
            .zip(&single)
            .map(|(im, outs)| SaliencyMap::from_nodes(&im.seg, outs[stage].as_slice()))
            .collect();
        let (report, pr) = evaluate_maps(&maps, &test_gts)?;
        stages.push(StageResult {
            stage: STAGE_NAMES[stage].to_string(),
            report,
            pr,
            training_loss: None,
            n_columns: 1,
        });
    }

    let train_banks = full_banks(train, &full)?;
    let test_banks = full_banks(test, &full)?;
    let train_gts: Vec<DVector<f64>> = train.iter().map(|im| im.node_gt().cloned()).collect::<Result<_>>()?;
    for (k, s) in stage_settings.iter().enumerate() {
        if s.use_features && !have_features {
            continue;
        }
        let layout = s.layout();
        let tr: Vec<ColumnBank> = train_banks.iter().map(|b| b.select(&layout)).collect::<Result<_>>()?;
        let w = fit_weights(&tr, &train_gts)?;
        let loss = training_loss(&tr, &train_gts, &w.w)?;
        let maps: Vec<SaliencyMap> = test
            .iter()
            .zip(&test_banks)
            .map(|(im, b)| infer(&b.select(&layout)?, &w, &im.seg))
            .collect::<Result<_>>()?;
        let (report, pr) = evaluate_maps(&maps, &test_gts)?;
        stages.push(StageResult {
            stage: STAGE_NAMES[4 + k].to_string(),
            report,
            pr,
            training_loss: Some(loss),
            n_columns: layout.len(),
        });
    }
    Ok(AblationReport { stages, skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SaliencyGraph;
    use crate::spectral::decompose;

    /// Two 5-node cliques joined by uniform weak links.
    fn two_clique_decomposition() -> SpectralDecomposition {
        let n = 10;
        let w = DMatrix::from_fn(n, n, |i, j| if (i < 5) == (j < 5) { 1.0 } else { 0.01 });
        let g = SaliencyGraph::from_weights(w).unwrap();
        decompose(&g.damped_rw_laplacian(DAMPING), Some(g.degree())).unwrap()
    }

    fn noisy_seed() -> DVector<f64> {
        DVector::from_column_slice(&[0.9, 0.2, 1.0, 0.6, 0.8, 0.1, 0.0, 0.3, 0.0, 0.05])
    }

    fn spread_within(y: &DVector<f64>, range: std::ops::Range<usize>) -> f64 {
        let vals: Vec<f64> = range.map(|i| y[i]).collect();
        vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - vals.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn refined_diffusion_is_constant_within_clusters() {
        let dec = two_clique_decomposition();
        let y = single_matrix_stage(&dec, 3, &noisy_seed(), &RefineParams::default()).unwrap();
        assert!(spread_within(&y, 0..5) < 1e-6);
        assert!(spread_within(&y, 5..10) < 1e-6);
        assert!(y[0] > y[5]);
    }

    #[test]
    fn raw_diffusion_varies_within_clusters_but_s2_does_not() {
        let dec = two_clique_decomposition();
        let s0 = single_matrix_stage(&dec, 0, &noisy_seed(), &RefineParams::default()).unwrap();
        assert!(spread_within(&s0, 0..5) > 1e-3);
        let s2 = single_matrix_stage(&dec, 2, &noisy_seed(), &RefineParams::default()).unwrap();
        assert!(spread_within(&s2, 0..5) < 1e-6);
        assert!(spread_within(&s2, 5..10) < 1e-6);
    }

    #[test]
    fn s1_only_removes_the_constant_term() {
        // Both are affine images of U diag(1/lambda) U^T s that differ by a
        // multiple of the constant vector, so after min-max they coincide.
        let dec = two_clique_decomposition();
        let s = noisy_seed();
        let s0 = single_matrix_stage(&dec, 0, &s, &RefineParams::default()).unwrap();
        let s1 = single_matrix_stage(&dec, 1, &s, &RefineParams::default()).unwrap();
        assert!((s0 - s1).amax() < 1e-9);
    }

    #[test]
    fn stage_layouts_are_nested() {
        let stages = trained_stage_settings(&GridSettings::default()).unwrap();
        let counts: Vec<usize> = stages.iter().map(|s| s.n_columns()).collect();
        assert_eq!(counts, vec![3, 33, 132, 136]);
        for pair in stages.windows(2) {
            let big = pair[1].layout();
            for l in pair[0].layout() {
                assert!(big.iter().any(|b| b.matrix == l.matrix && b.seed == l.seed));
            }
        }
    }

    #[test]
    fn matrix_choice_parses() {
        for c in MatrixChoice::ALL {
            assert_eq!(c.name().parse::<MatrixChoice>().unwrap(), c);
        }
        assert!("l_rw_tilde".parse::<MatrixChoice>().is_ok());
        assert!("nope".parse::<MatrixChoice>().is_err());
    }
}
