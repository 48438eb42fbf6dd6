//! Image, mask, feature and seed-map loading plus color-space conversion.
//!
//! Dataset layout on disk:
//!
//! ```text
//! <root>/images/<id>.(jpg|png)
//! <root>/masks/<id>.png
//! <root>/features/<id>.csv          (optional)
//! <root>/seedmaps/<method>/<id>.png (optional)
//! ```

use std::io::Read;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::superpixel::SuperpixelSegmentation;

/// Mask pixels at or above this 8-bit value are salient.
pub const MASK_THRESHOLD: u8 = 128;

/// Feature spaces used for superpixel means and edge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ColorSpace {
    Lab,
    Rgb,
    Hsv,
}

impl ColorSpace {
    pub const ALL: [ColorSpace; 3] = [ColorSpace::Lab, ColorSpace::Rgb, ColorSpace::Hsv];

    pub fn index(self) -> usize {
        match self {
            ColorSpace::Lab => 0,
            ColorSpace::Rgb => 1,
            ColorSpace::Hsv => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ColorSpace::Lab => "lab",
            ColorSpace::Rgb => "rgb",
            ColorSpace::Hsv => "hsv",
        }
    }
}

impl std::str::FromStr for ColorSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lab" => Ok(ColorSpace::Lab),
            "rgb" => Ok(ColorSpace::Rgb),
            "hsv" => Ok(ColorSpace::Hsv),
            other => Err(Error::Parse(format!("unknown color space '{other}'"))),
        }
    }
}

impl std::fmt::Display for ColorSpace {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Binary H×W mask, row-major, values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "mask buffer has {} entries, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidParameter(format!("mask value {v} is not binary")));
        }
        Ok(Self { width, height, data })
    }

    /// Binarizes an 8-bit grayscale image at [`MASK_THRESHOLD`].
    pub fn from_gray(img: &GrayImage) -> Self {
        let data = img.as_raw().iter().map(|&v| u8::from(v >= MASK_THRESHOLD)).collect();
        Self {
            width: img.width() as usize,
            height: img.height() as usize,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().map(|&v| v as usize).sum()
    }

    pub fn to_gray(&self) -> GrayImage {
        let raw = self.data.iter().map(|&v| v * 255).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, raw).expect("buffer length checked at construction")
    }
}

/// One image of a dataset with its optional ground truth.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    pub pixels: RgbImage,
    pub gt_mask: Option<BinaryMask>,
    pub source_path: PathBuf,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: RgbImage, gt_mask: Option<BinaryMask>) -> Result<Self> {
        if let Some(mask) = &gt_mask {
            check_same_size(&pixels, mask.width, mask.height, "mask")?;
        }
        Ok(Self {
            id: id.into(),
            pixels,
            gt_mask,
            source_path: PathBuf::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.pixels.width() as usize
    }

    pub fn height(&self) -> usize {
        self.pixels.height() as usize
    }
}

fn check_same_size(img: &RgbImage, w: usize, h: usize, what: &str) -> Result<()> {
    if img.width() as usize != w || img.height() as usize != h {
        return Err(Error::ShapeMismatch(format!(
            "{what} is {w}x{h} but image is {}x{}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn id_from_path(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads an 8-bit image and, optionally, its ground-truth mask.
pub fn load_sample(image_path: &Path, mask_path: Option<&Path>) -> Result<ImageSample> {
    let pixels = image::open(image_path)
        .map_err(|e| Error::decode(image_path, e))?
        .to_rgb8();
    let gt_mask = match mask_path {
        Some(p) => {
            let gray = load_gray(p)?;
            Some(BinaryMask::from_gray(&gray))
        }
        None => None,
    };
    let mut sample = ImageSample::new(id_from_path(image_path), pixels, gt_mask)?;
    sample.source_path = image_path.to_path_buf();
    Ok(sample)
}

/// Loads any image file as 8-bit grayscale.
pub fn load_gray(path: &Path) -> Result<GrayImage> {
    Ok(image::open(path).map_err(|e| Error::decode(path, e))?.to_luma8())
}

/// Per-pixel float color planes, row-major.
#[derive(Debug, Clone)]
pub struct ColorPlanes {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl ColorPlanes {
    pub fn get(&self, row: usize, col: usize) -> [f64; 3] {
        self.data[row * self.width + col]
    }
}

fn srgb_to_linear(c: u8) -> f64 {
    let c = c as f64 / 255.0;
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn lab_f(t: f64) -> f64 {
    const DELTA: f64 = 6.0 / 29.0;
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

/// CIE L*a*b* under the D65 white point.
pub fn srgb_to_lab(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(srgb_to_linear);
    let x = 0.412_456_4 * r + 0.357_576_1 * g + 0.180_437_5 * b;
    let y = 0.212_672_9 * r + 0.715_152_2 * g + 0.072_175_0 * b;
    let z = 0.019_333_9 * r + 0.119_192_0 * g + 0.950_304_1 * b;
    let fx = lab_f(x / 0.950_47);
    let fy = lab_f(y);
    let fz = lab_f(z / 1.088_83);
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// HSV with H in [0, 360) and S, V in [0, 1].
pub fn srgb_to_hsv(rgb: [u8; 3]) -> [f64; 3] {
    let [r, g, b] = rgb.map(|c| c as f64 / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let sat = if max == 0.0 { 0.0 } else { delta / max };
    [hue % 360.0, sat, max]
}

/// Converts one pixel into the float representation used for graph weights.
///
/// HSV channels are rescaled to [0, 255] so that Euclidean distances are on
/// a footing comparable with RGB; hue circularity is ignored.
pub fn convert_pixel(rgb: [u8; 3], space: ColorSpace) -> [f64; 3] {
    match space {
        ColorSpace::Lab => srgb_to_lab(rgb),
        ColorSpace::Rgb => rgb.map(f64::from),
        ColorSpace::Hsv => {
            let [h, s, v] = srgb_to_hsv(rgb);
            [h / 360.0 * 255.0, s * 255.0, v * 255.0]
        }
    }
}

pub fn convert_color(pixels: &RgbImage, space: ColorSpace) -> ColorPlanes {
    let data = pixels.pixels().map(|p| convert_pixel(p.0, space)).collect();
    ColorPlanes {
        width: pixels.width() as usize,
        height: pixels.height() as usize,
        data,
    }
}

/// External per-node saliency features, each column rescaled to [0, 1].
#[derive(Debug, Clone)]
pub struct FeatureBank {
    pub node_features: DMatrix<f64>,
    pub names: Vec<String>,
}

impl FeatureBank {
    pub fn n_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.node_features.ncols()
    }
}

/// Min-max rescale a column in place; constant columns become 0.5.
pub(crate) fn rescale_unit(values: &mut [f64]) {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(hi > lo) {
        values.iter_mut().for_each(|v| *v = 0.5);
    } else {
        let span = hi - lo;
        values.iter_mut().for_each(|v| *v = (*v - lo) / span);
    }
}

pub fn parse_feature_bank<R: Read>(reader: R, n_nodes: usize) -> Result<FeatureBank> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let names: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if names.is_empty() {
        return Err(Error::Parse("feature file has no columns".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(e.to_string()))?;
        if record.len() != names.len() {
            return Err(Error::Parse(format!(
                "row {} has {} fields, header has {}",
                line + 1,
                record.len(),
                names.len()
            )));
        }
        let row = record
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse(format!("row {}: bad number '{f}'", line + 1)))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    if rows.len() != n_nodes {
        return Err(Error::ShapeMismatch(format!(
            "feature file has {} rows, segmentation has {} nodes",
            rows.len(),
            n_nodes
        )));
    }
    let z = names.len();
    let mut m = DMatrix::zeros(n_nodes, z);
    for c in 0..z {
        let mut col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
        rescale_unit(&mut col);
        m.set_column(c, &nalgebra::DVector::from_vec(col));
    }
    Ok(FeatureBank {
        node_features: m,
        names,
    })
}

pub fn load_feature_bank(path: &Path, segmentation: &SuperpixelSegmentation) -> Result<FeatureBank> {
    let file = std::fs::File::open(path)?;
    parse_feature_bank(file, segmentation.n_nodes())
}

/// Writes per-node features in the CSV layout read by [`load_feature_bank`].
pub fn write_feature_csv(path: &Path, names: &[String], rows: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    w.write_record(names).map_err(|e| Error::Parse(e.to_string()))?;
    for r in 0..rows.nrows() {
        let rec: Vec<String> = (0..rows.ncols()).map(|c| format!("{}", rows[(r, c)])).collect();
        w.write_record(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
