//! Seed vectors: Gaussian center priors, absorbed-time border priors and
//! external saliency maps.

use std::path::Path;

use image::GrayImage;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{load_gray, rescale_unit};
use crate::refine::RefinedDiffusion;
use crate::superpixel::SuperpixelSegmentation;

pub const DEFAULT_GAUSSIAN_VARIANCES: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SeedKind {
    GaussianCenter(f64),
    AbsorbedTime,
    External(String),
}

#[derive(Debug, Clone)]
pub struct SeedVector {
    pub values: DVector<f64>,
    pub kind: SeedKind,
}

/// `exp(-d^2 / (2 variance))` with `d` the distance from the node centroid
/// to the image center, coordinates scaled to [-1, 1] on both axes.
pub fn gaussian_seed(seg: &SuperpixelSegmentation, variance: f64) -> Result<SeedVector> {
    if !(variance > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "variance must be positive, got {variance}"
        )));
    }
    let half_h = (seg.height() as f64 - 1.0) / 2.0;
    let half_w = (seg.width() as f64 - 1.0) / 2.0;
    let norm = |v: f64, half: f64| if half > 0.0 { (v - half) / half } else { 0.0 };
    let values = DVector::from_iterator(
        seg.n_nodes(),
        seg.centroids().iter().map(|&[r, c]| {
            let d2 = norm(r, half_h).powi(2) + norm(c, half_w).powi(2);
            (-d2 / (2.0 * variance)).exp()
        }),
    );
    Ok(SeedVector {
        values,
        kind: SeedKind::GaussianCenter(variance),
    })
}

/// Raw absorbed time `e = A_bar^-1 z`, `z` the non-border indicator.
pub fn absorbed_time_raw(refined: &RefinedDiffusion, is_border: &[bool]) -> Result<DVector<f64>> {
    if is_border.len() != refined.n() {
        return Err(Error::ShapeMismatch(format!(
            "{} border flags for {} nodes",
            is_border.len(),
            refined.n()
        )));
    }
    if is_border.iter().all(|&b| b) {
        return Err(Error::DegenerateGraph("every node touches the border".into()));
    }
    if !is_border.iter().any(|&b| b) {
        return Err(Error::DegenerateGraph("no node touches the border".into()));
    }
    let z = DVector::from_iterator(is_border.len(), is_border.iter().map(|&b| if b { 0.0 } else { 1.0 }));
    Ok(refined.apply(&z))
}

/// Absorbed time rescaled to [0, 1]; slower to reach the border is more salient.
pub fn absorbed_time_seed(refined: &RefinedDiffusion, is_border: &[bool]) -> Result<SeedVector> {
    let mut e = absorbed_time_raw(refined, is_border)?;
    rescale_unit(e.as_mut_slice());
    Ok(SeedVector {
        values: e,
        kind: SeedKind::AbsorbedTime,
    })
}

pub fn external_seed(map_path: &Path, seg: &SuperpixelSegmentation) -> Result<SeedVector> {
    let map = load_gray(map_path)?;
    let name = map_path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    external_seed_from_map(&map, seg, name)
}

/// Per-node mean of the map, divided by its maximum so the strongest node
/// reads 1 and zero stays zero.
pub fn external_seed_from_map(
    map: &GrayImage,
    seg: &SuperpixelSegmentation,
    name: impl Into<String>,
) -> Result<SeedVector> {
    let means = seg.node_means_of_gray(map)?;
    let max = means.iter().fold(0.0f64, |m, &v| m.max(v));
    if max <= 0.0 {
        return Err(Error::EmptySeed);
    }
    Ok(SeedVector {
        values: DVector::from_iterator(means.len(), means.iter().map(|v| v / max)),
        kind: SeedKind::External(name.into()),
    })
}
