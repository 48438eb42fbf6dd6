//! On-disk dataset layout:
//!
//! ```text
//! <root>/images/<id>.(jpg|jpeg|png)
//! <root>/masks/<id>.png
//! <root>/features/<id>.csv            optional
//! <root>/seedmaps/<method>/<id>.png   optional
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::ingest::{load_feature_bank, load_sample, BinaryMask, FeatureBank, ImageSample};
use crate::superpixel::{segment_with, SlicParams, SuperpixelSegmentation};
use crate::train::node_ground_truth;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    root: PathBuf,
    images: BTreeMap<String, PathBuf>,
}

impl Dataset {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        let dir = root.join("images");
        let mut images = BTreeMap::new();
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| e.to_ascii_lowercase());
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
                continue;
            };
            if let Some(prev) = images.insert(id.to_string(), path.clone()) {
                return Err(Error::InvalidParameter(format!(
                    "duplicate image id {id}: {} and {}",
                    prev.display(),
                    path.display()
                )));
            }
        }
        if images.is_empty() {
            return Err(Error::InsufficientData(format!("no images under {}", dir.display())));
        }
        Ok(Self { root, images })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// The root directory's name.
    pub fn name(&self) -> String {
        self.root
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.root.display().to_string())
    }

    /// Sorted.
    pub fn ids(&self) -> Vec<String> {
        self.images.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Even positions in sorted order train, odd positions test.
    pub fn split_ids(&self, split: Split) -> Vec<String> {
        self.images
            .keys()
            .enumerate()
            .filter(|(i, _)| match split {
                Split::Train => i % 2 == 0,
                Split::Test => i % 2 == 1,
                Split::All => true,
            })
            .map(|(_, id)| id.clone())
            .collect()
    }

    /// Keeps the first `n` ids in sorted order.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            root: self.root.clone(),
            images: self
                .images
                .iter()
                .take(n)
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn image_path(&self, id: &str) -> Result<&Path> {
        self.images
            .get(id)
            .map(PathBuf::as_path)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown image id {id}")))
    }

    pub fn mask_path(&self, id: &str) -> PathBuf {
        self.root.join("masks").join(format!("{id}.png"))
    }

    pub fn feature_path(&self, id: &str) -> PathBuf {
        self.root.join("features").join(format!("{id}.csv"))
    }

    pub fn seedmap_path(&self, method: &str, id: &str) -> PathBuf {
        self.root.join("seedmaps").join(method).join(format!("{id}.png"))
    }

    /// Loads the image and its mask when one exists.
    pub fn load(&self, id: &str) -> Result<ImageSample> {
        let mask = self.mask_path(id);
        load_sample(self.image_path(id)?, mask.exists().then_some(mask.as_path()))
    }

    pub fn prepare(&self, id: &str, slic: &SlicParams, with_features: bool) -> Result<PreparedImage> {
        let sample = self.load(id)?;
        let seg = segment_with(&sample, slic)?;
        let features = if with_features {
            let path = self.feature_path(id);
            if !path.exists() {
                return Err(Error::FeatureMissing(id.to_string()));
            }
            Some(load_feature_bank(&path, &seg)?)
        } else {
            None
        };
        PreparedImage::new(sample, seg, features)
    }
}

/// A segmented sample with its node-level ground truth.
#[derive(Debug, Clone)]
pub struct PreparedImage {
    pub sample: ImageSample,
    pub seg: SuperpixelSegmentation,
    pub features: Option<FeatureBank>,
    pub gt_nodes: Option<DVector<f64>>,
}

impl PreparedImage {
    pub fn new(sample: ImageSample, seg: SuperpixelSegmentation, features: Option<FeatureBank>) -> Result<Self> {
        let gt_nodes = sample
            .gt_mask
            .as_ref()
            .map(|m| node_ground_truth(&seg, m))
            .transpose()?;
        Ok(Self {
            sample,
            seg,
            features,
            gt_nodes,
        })
    }

    pub fn id(&self) -> &str {
        &self.sample.id
    }

    pub fn mask(&self) -> Result<&BinaryMask> {
        self.sample
            .gt_mask
            .as_ref()
            .ok_or_else(|| Error::InsufficientData(format!("sample {} has no ground-truth mask", self.sample.id)))
    }

    pub fn node_gt(&self) -> Result<&DVector<f64>> {
        self.gt_nodes
            .as_ref()
            .ok_or_else(|| Error::InsufficientData(format!("sample {} has no ground-truth mask", self.sample.id)))
    }
}
