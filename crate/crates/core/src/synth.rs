//! Procedural salient-object datasets in the on-disk layout of
//! [`crate::dataset`]: a colored object on a cluttered two-color background,
//! its mask, a noisy seed map derived from the mask, and per-node feature
//! files.

use std::f64::consts::PI;
use std::path::Path;

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::ingest::{write_feature_csv, BinaryMask, ColorSpace, ImageSample};
use crate::superpixel::{segment_with, SlicParams, SuperpixelSegmentation};

/// Method name of the generated seed maps under `seedmaps/`.
pub const NOISY_SEED_METHOD: &str = "noisy-gt";
pub const FEATURE_NAMES: [&str; 3] = ["border_contrast", "detector", "centrality"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_images: usize,
    pub width: u32,
    pub height: u32,
    pub seed: u64,
    /// Fraction of seed-map pixels forced to white.
    pub salt_fraction: f64,
    /// Gaussian blur sigma applied to the mask before salting.
    pub blur_sigma: f32,
    /// Segmentation the feature rows are computed on; must match the one
    /// used when the dataset is read back.
    pub slic: SlicParams,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 200,
            width: 120,
            height: 90,
            seed: 2024,
            salt_fraction: 0.2,
            blur_sigma: 3.0,
            slic: SlicParams::default(),
        }
    }
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    (0..3)
        .map(|k| (f64::from(a[k]) - f64::from(b[k])).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// A color at least `min_dist` away from every color in `avoid`.
fn distinct_color(rng: &mut ChaCha8Rng, avoid: &[[u8; 3]], min_dist: f64) -> [u8; 3] {
    loop {
        let c = random_color(rng);
        if avoid.iter().all(|&a| color_distance(a, c) >= min_dist) {
            return c;
        }
    }
}

fn solid(c: [u8; 3]) -> [f64; 3] {
    c.map(f64::from)
}

fn lerp(a: [u8; 3], b: [u8; 3], t: f64) -> [f64; 3] {
    std::array::from_fn(|k| f64::from(a[k]) * (1.0 - t) + f64::from(b[k]) * t)
}

/// One image and its mask.
pub fn synth_image(rng: &mut ChaCha8Rng, width: u32, height: u32) -> (RgbImage, BinaryMask) {
    let (w, h) = (f64::from(width), f64::from(height));
    let bg_a = random_color(rng);
    let bg_b = distinct_color(rng, &[bg_a], 40.0);
    let clutter = distinct_color(rng, &[bg_a, bg_b], 40.0);
    let obj = distinct_color(rng, &[bg_a, bg_b, clutter], 110.0);
    let obj_inner = distinct_color(rng, &[bg_a, bg_b, clutter], 90.0);
    let angle = rng.random_range(0.0..PI);

    // Object: rotated ellipse near the center with an inner ellipse part.
    let cy = h / 2.0 + rng.random_range(-0.15..0.15) * h;
    let cx = w / 2.0 + rng.random_range(-0.15..0.15) * w;
    let ry = rng.random_range(0.15..0.3) * h;
    let rx = rng.random_range(0.15..0.3) * w;
    let rot = rng.random_range(0.0..PI);
    let inner = rng.random_range(0.3..0.6);

    // Clutter: a few axis-aligned blocks hugging the border.
    let blocks: Vec<[f64; 4]> = (0..rng.random_range(1..4))
        .map(|_| {
            let bh = rng.random_range(0.1..0.3) * h;
            let bw = rng.random_range(0.1..0.3) * w;
            let (y0, x0) = match rng.random_range(0..4) {
                0 => (0.0, rng.random_range(0.0..w - bw)),
                1 => (h - bh, rng.random_range(0.0..w - bw)),
                2 => (rng.random_range(0.0..h - bh), 0.0),
                _ => (rng.random_range(0.0..h - bh), w - bw),
            };
            [y0, x0, y0 + bh, x0 + bw]
        })
        .collect();

    let mut mask = vec![0u8; (width * height) as usize];
    let mut img = RgbImage::new(width, height);
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (f64::from(y) + 0.5, f64::from(x) + 0.5);
            let (dy, dx) = (fy - cy, fx - cx);
            let u = dx * rot.cos() + dy * rot.sin();
            let v = -dx * rot.sin() + dy * rot.cos();
            let r2 = (u / rx).powi(2) + (v / ry).powi(2);
            let t = ((fx / w) * angle.cos() + (fy / h) * angle.sin()).clamp(0.0, 1.0);
            let base = if r2 <= inner * inner {
                solid(obj_inner)
            } else if r2 <= 1.0 {
                solid(obj)
            } else if blocks
                .iter()
                .any(|b| fy >= b[0] && fy < b[2] && fx >= b[1] && fx < b[3])
            {
                solid(clutter)
            } else {
                lerp(bg_a, bg_b, t)
            };
            if r2 <= 1.0 {
                mask[(y * width + x) as usize] = 1;
            }
            let px: [u8; 3] = std::array::from_fn(|k| {
                let noise = (rng.random::<f64>() + rng.random::<f64>() - 1.0) * 12.0;
                (base[k] + noise).round().clamp(0.0, 255.0) as u8
            });
            img.put_pixel(x, y, Rgb(px));
        }
    }
    let mask = BinaryMask::new(width as usize, height as usize, mask).expect("mask size");
    (img, mask)
}

/// Mask blurred with a Gaussian, then a `salt_fraction` of pixels set to 255.
pub fn noisy_seed_map(mask: &BinaryMask, rng: &mut ChaCha8Rng, blur_sigma: f32, salt_fraction: f64) -> GrayImage {
    let mut map = imageops::blur(&mask.to_gray(), blur_sigma);
    for p in map.pixels_mut() {
        if rng.random::<f64>() < salt_fraction {
            *p = Luma([255]);
        }
    }
    map
}

/// Per-node features: Lab contrast to the mean border color, a noisy
/// detector response built from mask coverage, and closeness to the center.
pub fn synth_features(seg: &SuperpixelSegmentation, mask: &BinaryMask, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let n = seg.n_nodes();
    let lab = seg.mean_feature(ColorSpace::Lab);
    let border: Vec<usize> = (0..n).filter(|&i| seg.is_border()[i]).collect();
    let mean_border: [f64; 3] =
        std::array::from_fn(|k| border.iter().map(|&i| lab[i][k]).sum::<f64>() / border.len().max(1) as f64);
    let coverage = seg.node_average(&mask.data().iter().map(|&v| f64::from(v)).collect::<Vec<_>>());
    let (hh, hw) = (seg.height() as f64 / 2.0, seg.width() as f64 / 2.0);
    DMatrix::from_fn(n, 3, |i, z| match z {
        0 => (0..3).map(|k| (lab[i][k] - mean_border[k]).powi(2)).sum::<f64>().sqrt(),
        1 => 0.6 * coverage[i] + 0.4 * rng.random::<f64>(),
        _ => {
            let [r, c] = seg.centroids()[i];
            1.0 - (((r - hh) / hh).powi(2) + ((c - hw) / hw).powi(2)).sqrt() / 2f64.sqrt()
        }
    })
}

/// Writes a complete dataset under `root` and opens it.
pub fn generate_dataset(root: &Path, cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_images == 0 || cfg.width < 8 || cfg.height < 8 {
        return Err(Error::InvalidParameter(
            "need at least one image of at least 8x8 pixels".into(),
        ));
    }
    for sub in ["images", "masks", "features"] {
        std::fs::create_dir_all(root.join(sub))?;
    }
    let seed_dir = root.join("seedmaps").join(NOISY_SEED_METHOD);
    std::fs::create_dir_all(&seed_dir)?;
    let names: Vec<String> = FEATURE_NAMES.iter().map(|s| s.to_string()).collect();
    let digits = cfg.n_images.to_string().len().max(4);
    for i in 0..cfg.n_images {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(i as u64));
        let id = format!("img_{i:0digits$}");
        let (img, mask) = synth_image(&mut rng, cfg.width, cfg.height);
        let image_path = root.join("images").join(format!("{id}.png"));
        img.save(&image_path).map_err(|e| Error::decode(&image_path, e))?;
        let mask_path = root.join("masks").join(format!("{id}.png"));
        mask.to_gray()
            .save(&mask_path)
            .map_err(|e| Error::decode(&mask_path, e))?;
        let seed_path = seed_dir.join(format!("{id}.png"));
        noisy_seed_map(&mask, &mut rng, cfg.blur_sigma, cfg.salt_fraction)
            .save(&seed_path)
            .map_err(|e| Error::decode(&seed_path, e))?;
        let sample = ImageSample::new(id.clone(), img, Some(mask.clone()))?;
        let seg = segment_with(&sample, &cfg.slic)?;
        let feats = synth_features(&seg, &mask, &mut rng);
        write_feature_csv(&root.join("features").join(format!("{id}.csv")), &names, &feats)?;
    }
    Dataset::open(root)
}
