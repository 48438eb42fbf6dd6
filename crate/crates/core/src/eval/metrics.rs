//! Pixel-level saliency metrics on 8-bit quantized maps.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::ingest::BinaryMask;
use crate::train::SaliencyMap;

pub const BETA2: f64 = 0.3;
pub const N_THRESHOLDS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurveKind {
    Pr,
    Roc,
    Cose,
}

impl CurveKind {
    /// CSV column names for x and y.
    pub fn header(self) -> (&'static str, &'static str) {
        match self {
            CurveKind::Pr => ("recall", "precision"),
            CurveKind::Roc => ("false_positive_rate", "true_positive_rate"),
            CurveKind::Cose => ("seed_percent", "accuracy"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSeries {
    /// Sorted by x.
    pub points: Vec<(f64, f64)>,
    pub kind: CurveKind,
    pub n_samples_averaged: usize,
}

impl CurveSeries {
    pub fn new(mut points: Vec<(f64, f64)>, kind: CurveKind, n_samples_averaged: usize) -> Self {
        points.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        Self {
            points,
            kind,
            n_samples_averaged,
        }
    }

    pub fn to_csv(&self) -> String {
        let (x, y) = self.kind.header();
        let mut out = format!("{x},{y}\n");
        for (a, b) in &self.points {
            out.push_str(&format!("{a},{b}\n"));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// y at the first point whose x equals `x`, if any.
    pub fn y_at(&self, x: f64) -> Option<f64> {
        self.points.iter().find(|p| p.0 == x).map(|p| p.1)
    }
}

/// Dataset-level scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub auc: f64,
    pub mor: f64,
    pub n_images: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScore {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

pub fn f_beta(precision: f64, recall: f64) -> f64 {
    let denom = BETA2 * precision + recall;
    if denom > 0.0 {
        (1.0 + BETA2) * precision * recall / denom
    } else {
        0.0
    }
}

fn check_pair(map: &SaliencyMap, gt: &BinaryMask) -> Result<()> {
    if map.width != gt.width() || map.height != gt.height() || map.data.len() != map.width * map.height {
        return Err(Error::ShapeMismatch(format!(
            "map is {}x{}, mask is {}x{}",
            map.width,
            map.height,
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

/// Pixel counts at or above each threshold, split by ground truth.
struct ThresholdCounts {
    tp: [u64; N_THRESHOLDS],
    fp: [u64; N_THRESHOLDS],
    n_pos: u64,
    n_neg: u64,
}

fn threshold_counts(map: &SaliencyMap, gt: &BinaryMask) -> Result<ThresholdCounts> {
    check_pair(map, gt)?;
    let mut hist_pos = [0u64; N_THRESHOLDS];
    let mut hist_neg = [0u64; N_THRESHOLDS];
    for (level, &g) in map.to_levels().iter().zip(gt.data()) {
        if g != 0 {
            hist_pos[*level as usize] += 1;
        } else {
            hist_neg[*level as usize] += 1;
        }
    }
    let mut tp = [0u64; N_THRESHOLDS];
    let mut fp = [0u64; N_THRESHOLDS];
    let (mut cp, mut cn) = (0, 0);
    for t in (0..N_THRESHOLDS).rev() {
        cp += hist_pos[t];
        cn += hist_neg[t];
        tp[t] = cp;
        fp[t] = cn;
    }
    Ok(ThresholdCounts {
        tp,
        fp,
        n_pos: cp,
        n_neg: cn,
    })
}

fn precision_of(tp: u64, fp: u64) -> f64 {
    // Nothing predicted: precision 1 by convention.
    if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    }
}

/// (precision, recall) for every threshold `t`, binarizing at `level >= t`.
pub fn pr_points(map: &SaliencyMap, gt: &BinaryMask) -> Result<Vec<(f64, f64)>> {
    let c = threshold_counts(map, gt)?;
    if c.n_pos == 0 {
        return Err(Error::EmptyGroundTruth(String::new()));
    }
    Ok((0..N_THRESHOLDS)
        .map(|t| (precision_of(c.tp[t], c.fp[t]), c.tp[t] as f64 / c.n_pos as f64))
        .collect())
}

/// Mean precision and recall per threshold over images with foreground.
pub fn pr_curve(maps: &[SaliencyMap], gts: &[&BinaryMask]) -> Result<CurveSeries> {
    check_lengths(maps, gts)?;
    let mut sum = vec![(0.0, 0.0); N_THRESHOLDS];
    let mut used = 0;
    for (i, (map, gt)) in maps.iter().zip(gts).enumerate() {
        match pr_points(map, gt) {
            Ok(pts) => {
                for (acc, (p, r)) in sum.iter_mut().zip(pts) {
                    acc.0 += p;
                    acc.1 += r;
                }
                used += 1;
            }
            Err(Error::EmptyGroundTruth(_)) => warn!(image = i, "skipping image with empty ground truth"),
            Err(e) => return Err(e),
        }
    }
    if used == 0 {
        return Err(Error::EmptyGroundTruth("every image".into()));
    }
    let n = used as f64;
    let points = sum.into_iter().map(|(p, r)| (r / n, p / n)).collect();
    Ok(CurveSeries::new(points, CurveKind::Pr, used))
}

fn check_lengths(maps: &[SaliencyMap], gts: &[&BinaryMask]) -> Result<()> {
    if maps.len() != gts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} maps but {} masks",
            maps.len(),
            gts.len()
        )));
    }
    Ok(())
}

/// `min(2 mean, 255)` on the 8-bit scale.
pub fn adaptive_threshold(map: &SaliencyMap) -> f64 {
    let levels = map.to_levels();
    let mean = levels.iter().map(|&v| f64::from(v)).sum::<f64>() / levels.len().max(1) as f64;
    (2.0 * mean).min(255.0)
}

pub fn adaptive_binarize(map: &SaliencyMap) -> Vec<bool> {
    let t = adaptive_threshold(map);
    map.to_levels().iter().map(|&v| f64::from(v) >= t).collect()
}

/// Precision, recall and F-beta at the adaptive threshold.
pub fn f_measure(map: &SaliencyMap, gt: &BinaryMask) -> Result<PrfScore> {
    check_pair(map, gt)?;
    let n_pos = gt.foreground_count();
    if n_pos == 0 {
        return Err(Error::EmptyGroundTruth(String::new()));
    }
    let (mut tp, mut fp) = (0u64, 0u64);
    for (&b, &g) in adaptive_binarize(map).iter().zip(gt.data()) {
        if b {
            if g != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
    }
    let precision = precision_of(tp, fp);
    let recall = tp as f64 / n_pos as f64;
    Ok(PrfScore {
        precision,
        recall,
        f_measure: f_beta(precision, recall),
    })
}

/// (fpr, tpr) per threshold plus the (0, 0) nothing-predicted endpoint.
pub fn roc_points(map: &SaliencyMap, gt: &BinaryMask) -> Result<Vec<(f64, f64)>> {
    let c = threshold_counts(map, gt)?;
    if c.n_pos == 0 {
        return Err(Error::EmptyGroundTruth(String::new()));
    }
    let fpr = |fp: u64| if c.n_neg == 0 { 0.0 } else { fp as f64 / c.n_neg as f64 };
    let mut pts: Vec<(f64, f64)> = (0..N_THRESHOLDS)
        .map(|t| (fpr(c.fp[t]), c.tp[t] as f64 / c.n_pos as f64))
        .collect();
    pts.push((0.0, 0.0));
    pts.push((1.0, 1.0));
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    Ok(pts)
}

/// Trapezoidal area under the ROC curve.
pub fn auc(map: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    let pts = roc_points(map, gt)?;
    Ok(pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum())
}

/// IoU of the adaptive binarization with the ground truth.
pub fn mor(map: &SaliencyMap, gt: &BinaryMask) -> Result<f64> {
    check_pair(map, gt)?;
    if gt.foreground_count() == 0 {
        return Err(Error::EmptyGroundTruth(String::new()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&b, &g) in adaptive_binarize(map).iter().zip(gt.data()) {
        let g = g != 0;
        inter += u64::from(b && g);
        union += u64::from(b || g);
    }
    Ok(inter as f64 / union as f64)
}

/// Dataset scores and the mean PR curve. The dataset F-measure combines
/// the mean precision and mean recall.
pub fn evaluate_maps(maps: &[SaliencyMap], gts: &[&BinaryMask]) -> Result<(MetricReport, CurveSeries)> {
    check_lengths(maps, gts)?;
    let pr = pr_curve(maps, gts)?;
    let (mut p, mut r, mut a, mut m, mut n) = (0.0, 0.0, 0.0, 0.0, 0usize);
    for (map, gt) in maps.iter().zip(gts) {
        if gt.foreground_count() == 0 {
            continue;
        }
        let s = f_measure(map, gt)?;
        p += s.precision;
        r += s.recall;
        a += auc(map, gt)?;
        m += mor(map, gt)?;
        n += 1;
    }
    let k = n as f64;
    let (p, r) = (p / k, r / k);
    Ok((
        MetricReport {
            precision: p,
            recall: r,
            f_measure: f_beta(p, r),
            auc: a / k,
            mor: m / k,
            n_images: n,
        },
        pr,
    ))
}

/// Mean ROC curve over images with foreground.
pub fn roc_curve(maps: &[SaliencyMap], gts: &[&BinaryMask]) -> Result<CurveSeries> {
    check_lengths(maps, gts)?;
    let mut sum = vec![(0.0, 0.0); N_THRESHOLDS];
    let mut used = 0;
    for (map, gt) in maps.iter().zip(gts) {
        let c = threshold_counts(map, gt)?;
        if c.n_pos == 0 {
            continue;
        }
        for (t, acc) in sum.iter_mut().enumerate() {
            acc.0 += if c.n_neg == 0 {
                0.0
            } else {
                c.fp[t] as f64 / c.n_neg as f64
            };
            acc.1 += c.tp[t] as f64 / c.n_pos as f64;
        }
        used += 1;
    }
    if used == 0 {
        return Err(Error::EmptyGroundTruth("every image".into()));
    }
    let n = used as f64;
    Ok(CurveSeries::new(
        sum.into_iter().map(|(x, y)| (x / n, y / n)).collect(),
        CurveKind::Roc,
        used,
    ))
}
