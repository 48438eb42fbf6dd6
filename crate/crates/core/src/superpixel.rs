//! SLIC superpixels and per-node statistics.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{convert_color, ColorPlanes, ColorSpace, ImageSample};

pub const DEFAULT_N_SUPERPIXELS: usize = 200;
pub const DEFAULT_COMPACTNESS: f64 = 10.0;
pub const DEFAULT_SLIC_ITERATIONS: usize = 10;
pub const MAX_N_SUPERPIXELS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicParams {
    pub n_target: usize,
    pub compactness: f64,
    pub iterations: usize,
}

impl Default for SlicParams {
    fn default() -> Self {
        Self {
            n_target: DEFAULT_N_SUPERPIXELS,
            compactness: DEFAULT_COMPACTNESS,
            iterations: DEFAULT_SLIC_ITERATIONS,
        }
    }
}

/// Pixel-to-node labeling with the node statistics the graph and seeds need.
#[derive(Debug, Clone)]
pub struct SuperpixelSegmentation {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    n_nodes: usize,
    /// (row, col) in pixels.
    centroids: Vec<[f64; 2]>,
    /// Indexed by [`ColorSpace::index`].
    mean_feature: [Vec<[f64; 3]>; 3],
    pixel_count: Vec<usize>,
    is_border: Vec<bool>,
}

impl SuperpixelSegmentation {
    /// Builds a segmentation from an explicit label map. Ids must cover
    /// `0..N` with no gaps.
    pub fn from_labels(sample: &ImageSample, labels: Vec<u32>) -> Result<Self> {
        let (w, h) = (sample.width(), sample.height());
        if labels.len() != w * h {
            return Err(Error::ShapeMismatch(format!(
                "label map has {} entries, image is {w}x{h}",
                labels.len()
            )));
        }
        let n = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let mut pixel_count = vec![0usize; n];
        let mut centroid_sum = vec![[0.0f64; 2]; n];
        let mut is_border = vec![false; n];
        for row in 0..h {
            for col in 0..w {
                let l = labels[row * w + col] as usize;
                pixel_count[l] += 1;
                centroid_sum[l][0] += row as f64;
                centroid_sum[l][1] += col as f64;
                if row == 0 || col == 0 || row + 1 == h || col + 1 == w {
                    is_border[l] = true;
                }
            }
        }
        if let Some(empty) = pixel_count.iter().position(|&c| c == 0) {
            return Err(Error::InvalidParameter(format!("label {empty} owns no pixels")));
        }
        let centroids = centroid_sum
            .iter()
            .zip(&pixel_count)
            .map(|(s, &c)| [s[0] / c as f64, s[1] / c as f64])
            .collect();
        let mean_feature = ColorSpace::ALL.map(|space| {
            let planes = convert_color(&sample.pixels, space);
            node_means(&planes, &labels, &pixel_count)
        });
        Ok(Self {
            width: w,
            height: h,
            labels,
            n_nodes: n,
            centroids,
            mean_feature,
            pixel_count,
            is_border,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, row: usize, col: usize) -> usize {
        self.labels[row * self.width + col] as usize
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn mean_feature(&self, space: ColorSpace) -> &[[f64; 3]] {
        &self.mean_feature[space.index()]
    }

    pub fn pixel_count(&self) -> &[usize] {
        &self.pixel_count
    }

    pub fn is_border(&self) -> &[bool] {
        &self.is_border
    }

    /// Sorted 4-connected spatial neighbor lists.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut sets = vec![BTreeSet::new(); self.n_nodes];
        for row in 0..self.height {
            for col in 0..self.width {
                let a = self.label(row, col);
                if col + 1 < self.width {
                    let b = self.label(row, col + 1);
                    if a != b {
                        sets[a].insert(b);
                        sets[b].insert(a);
                    }
                }
                if row + 1 < self.height {
                    let b = self.label(row + 1, col);
                    if a != b {
                        sets[a].insert(b);
                        sets[b].insert(a);
                    }
                }
            }
        }
        sets.into_iter().map(|s| s.into_iter().collect()).collect()
    }

    /// Per-pixel values from per-node values.
    pub fn paint(&self, node_values: &[f64]) -> Vec<f64> {
        assert_eq!(node_values.len(), self.n_nodes, "one value per node");
        self.labels.iter().map(|&l| node_values[l as usize]).collect()
    }

    /// Mean of a per-pixel scalar field over each node.
    pub fn node_average(&self, pixel_values: &[f64]) -> Vec<f64> {
        assert_eq!(pixel_values.len(), self.labels.len());
        let mut sum = vec![0.0; self.n_nodes];
        for (&l, &v) in self.labels.iter().zip(pixel_values) {
            sum[l as usize] += v;
        }
        sum.iter().zip(&self.pixel_count).map(|(s, &c)| s / c as f64).collect()
    }

    /// Relabels nodes so that old id `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.n_nodes);
        let mut inv = vec![0usize; self.n_nodes];
        for (old, &new) in perm.iter().enumerate() {
            inv[new] = old;
        }
        let pick = |v: &Vec<[f64; 3]>| inv.iter().map(|&o| v[o]).collect::<Vec<_>>();
        Self {
            width: self.width,
            height: self.height,
            labels: self.labels.iter().map(|&l| perm[l as usize] as u32).collect(),
            n_nodes: self.n_nodes,
            centroids: inv.iter().map(|&o| self.centroids[o]).collect(),
            mean_feature: [
                pick(&self.mean_feature[0]),
                pick(&self.mean_feature[1]),
                pick(&self.mean_feature[2]),
            ],
            pixel_count: inv.iter().map(|&o| self.pixel_count[o]).collect(),
            is_border: inv.iter().map(|&o| self.is_border[o]).collect(),
        }
    }

    /// Writes the label map as a 16-bit grayscale PNG.
    pub fn save_label_png(&self, path: &Path) -> Result<()> {
        let raw: Vec<u16> = self.labels.iter().map(|&l| l as u16).collect();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).expect("label buffer sized to image");
        img.save(path).map_err(|e| Error::decode(path, e))
    }

    /// Per-node mean of an 8-bit map, in [0, 255].
    pub fn node_means_of_gray(&self, map: &GrayImage) -> Result<Vec<f64>> {
        if map.width() as usize != self.width || map.height() as usize != self.height {
            return Err(Error::ShapeMismatch(format!(
                "map is {}x{}, segmentation is {}x{}",
                map.width(),
                map.height(),
                self.width,
                self.height
            )));
        }
        let vals: Vec<f64> = map.as_raw().iter().map(|&v| v as f64).collect();
        Ok(self.node_average(&vals))
    }
}

fn node_means(planes: &ColorPlanes, labels: &[u32], counts: &[usize]) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0f64; 3]; counts.len()];
    for (px, &l) in planes.data.iter().zip(labels) {
        let s = &mut sums[l as usize];
        s[0] += px[0];
        s[1] += px[1];
        s[2] += px[2];
    }
    sums.iter().zip(counts).map(|(s, &c)| s.map(|v| v / c as f64)).collect()
}

pub fn segment(sample: &ImageSample, n_target: usize, compactness: f64) -> Result<SuperpixelSegmentation> {
    segment_with(
        sample,
        &SlicParams {
            n_target,
            compactness,
            ..SlicParams::default()
        },
    )
}

#[derive(Debug, Clone, Copy)]
struct Center {
    color: [f64; 3],
    row: f64,
    col: f64,
}

/// SLIC in Lab with grid seeding, gradient-minimum perturbation and a
/// connectivity post-pass.
pub fn segment_with(sample: &ImageSample, params: &SlicParams) -> Result<SuperpixelSegmentation> {
    let (w, h) = (sample.width(), sample.height());
    let n_pixels = w * h;
    if params.n_target == 0 || params.n_target > MAX_N_SUPERPIXELS {
        return Err(Error::InvalidParameter(format!(
            "n_target {} outside [1, {MAX_N_SUPERPIXELS}]",
            params.n_target
        )));
    }
    if !(params.compactness > 0.0) {
        return Err(Error::InvalidParameter("compactness must be positive".into()));
    }
    if n_pixels < params.n_target {
        return Err(Error::ImageTooSmall {
            pixels: n_pixels,
            n_target: params.n_target,
        });
    }

    let lab = convert_color(&sample.pixels, ColorSpace::Lab);
    let step = (n_pixels as f64 / params.n_target as f64).sqrt();
    let grid_rows = ((h as f64 / step).round() as usize).max(1);
    let grid_cols = ((w as f64 / step).round() as usize).max(1);
    let cell_h = h as f64 / grid_rows as f64;
    let cell_w = w as f64 / grid_cols as f64;

    let mut centers = Vec::with_capacity(grid_rows * grid_cols);
    for gr in 0..grid_rows {
        for gc in 0..grid_cols {
            // Pixel-center coordinates of the grid cell's middle.
            let fr = (gr as f64 + 0.5) * cell_h - 0.5;
            let fc = (gc as f64 + 0.5) * cell_w - 0.5;
            let (r, c) = (fr.round() as usize, fc.round() as usize);
            let (r, c) = (r.min(h - 1), c.min(w - 1));
            let moved = lowest_gradient(&lab, r, c);
            let (row, col) = if moved == (r, c) {
                (fr, fc)
            } else {
                (moved.0 as f64, moved.1 as f64)
            };
            centers.push(Center {
                color: lab.get(moved.0, moved.1),
                row,
                col,
            });
        }
    }

    // Initial assignment: the grid cell each pixel falls in.
    let mut labels: Vec<u32> = (0..n_pixels)
        .map(|i| {
            let gr = (((i / w) as f64 / cell_h) as usize).min(grid_rows - 1);
            let gc = (((i % w) as f64 / cell_w) as usize).min(grid_cols - 1);
            (gr * grid_cols + gc) as u32
        })
        .collect();

    let spatial_weight = (params.compactness / step).powi(2);
    let radius = cell_h.max(cell_w).ceil() as isize;
    let mut dist = vec![f64::INFINITY; n_pixels];
    for _ in 0..params.iterations {
        dist.iter_mut().for_each(|d| *d = f64::INFINITY);
        for (k, ctr) in centers.iter().enumerate() {
            let (cr, cc) = (ctr.row.round() as isize, ctr.col.round() as isize);
            let r0 = (cr - radius).max(0) as usize;
            let r1 = ((cr + radius) as usize).min(h - 1);
            let c0 = (cc - radius).max(0) as usize;
            let c1 = ((cc + radius) as usize).min(w - 1);
            for r in r0..=r1 {
                for c in c0..=c1 {
                    let idx = r * w + c;
                    let px = lab.data[idx];
                    let dc = (px[0] - ctr.color[0]).powi(2)
                        + (px[1] - ctr.color[1]).powi(2)
                        + (px[2] - ctr.color[2]).powi(2);
                    let ds = (r as f64 - ctr.row).powi(2) + (c as f64 - ctr.col).powi(2);
                    let d = dc + ds * spatial_weight;
                    if d < dist[idx] {
                        dist[idx] = d;
                        labels[idx] = k as u32;
                    }
                }
            }
        }
        let mut acc = vec![([0.0f64; 3], 0.0f64, 0.0f64, 0usize); centers.len()];
        for (idx, &l) in labels.iter().enumerate() {
            let a = &mut acc[l as usize];
            let px = lab.data[idx];
            a.0[0] += px[0];
            a.0[1] += px[1];
            a.0[2] += px[2];
            a.1 += (idx / w) as f64;
            a.2 += (idx % w) as f64;
            a.3 += 1;
        }
        for (ctr, a) in centers.iter_mut().zip(&acc) {
            if a.3 > 0 {
                let n = a.3 as f64;
                ctr.color = a.0.map(|v| v / n);
                ctr.row = a.1 / n;
                ctr.col = a.2 / n;
            }
        }
    }

    let min_size = ((n_pixels as f64 / params.n_target as f64) / 4.0).floor().max(1.0) as usize;
    let labels = enforce_connectivity(&labels, w, h, min_size);
    SuperpixelSegmentation::from_labels(sample, labels)
}

fn lowest_gradient(lab: &ColorPlanes, r: usize, c: usize) -> (usize, usize) {
    let (w, h) = (lab.width, lab.height);
    let grad = |r: usize, c: usize| {
        let d = |a: [f64; 3], b: [f64; 3]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2);
        let left = lab.get(r, c.saturating_sub(1));
        let right = lab.get(r, (c + 1).min(w - 1));
        let up = lab.get(r.saturating_sub(1), c);
        let down = lab.get((r + 1).min(h - 1), c);
        d(left, right) + d(up, down)
    };
    let mut best = (r, c);
    let mut best_g = grad(r, c);
    for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
        for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
            let g = grad(nr, nc);
            if g < best_g {
                best_g = g;
                best = (nr, nc);
            }
        }
    }
    best
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Splits labels into 4-connected components, keeps the largest component
/// of every label (if it reaches `min_size`), and merges every other
/// component into its largest neighbor. Output ids are compact, assigned in
/// raster order of first appearance.
pub(crate) fn enforce_connectivity(labels: &[u32], w: usize, h: usize, min_size: usize) -> Vec<u32> {
    let n = w * h;
    let mut comp = vec![usize::MAX; n];
    let mut comp_label = Vec::new();
    let mut comp_size = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comp_size.len();
        let lab = labels[start];
        comp[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(p) = queue.pop_front() {
            size += 1;
            let (r, c) = (p / w, p % w);
            let mut visit = |q: usize| {
                if comp[q] == usize::MAX && labels[q] == lab {
                    comp[q] = id;
                    queue.push_back(q);
                }
            };
            if c > 0 {
                visit(p - 1);
            }
            if c + 1 < w {
                visit(p + 1);
            }
            if r > 0 {
                visit(p - w);
            }
            if r + 1 < h {
                visit(p + w);
            }
        }
        comp_label.push(lab);
        comp_size.push(size);
    }
    let n_comp = comp_size.len();

    let mut neighbors = vec![BTreeSet::new(); n_comp];
    for p in 0..n {
        let (r, c) = (p / w, p % w);
        if c + 1 < w && comp[p] != comp[p + 1] {
            neighbors[comp[p]].insert(comp[p + 1]);
            neighbors[comp[p + 1]].insert(comp[p]);
        }
        if r + 1 < h && comp[p] != comp[p + w] {
            neighbors[comp[p]].insert(comp[p + w]);
            neighbors[comp[p + w]].insert(comp[p]);
        }
    }

    // The primary component of each label is its largest (earliest on ties).
    let max_label = comp_label.iter().copied().max().unwrap_or(0) as usize;
    let mut primary = vec![usize::MAX; max_label + 1];
    for c in 0..n_comp {
        let l = comp_label[c] as usize;
        if primary[l] == usize::MAX || comp_size[c] > comp_size[primary[l]] {
            primary[l] = c;
        }
    }
    let mut to_merge: Vec<usize> = (0..n_comp)
        .filter(|&c| primary[comp_label[c] as usize] != c || comp_size[c] < min_size)
        .collect();
    to_merge.sort_by_key(|&c| (comp_size[c], c));

    let mut parent: Vec<usize> = (0..n_comp).collect();
    let mut group_size = comp_size.clone();
    for &c in &to_merge {
        let root = find(&mut parent, c);
        // Largest adjacent group, found through every member's neighbors.
        let members: Vec<usize> = (0..n_comp).filter(|&m| find(&mut parent, m) == root).collect();
        let mut best: Option<(usize, usize)> = None;
        for &m in &members {
            for &nb in &neighbors[m] {
                let nr = find(&mut parent, nb);
                if nr == root {
                    continue;
                }
                let cand = (group_size[nr], nr);
                best = match best {
                    Some((bs, br)) if bs > cand.0 || (bs == cand.0 && br < cand.1) => Some((bs, br)),
                    _ => Some(cand),
                };
            }
        }
        if let Some((_, target)) = best {
            parent[root] = target;
            group_size[target] += group_size[root];
        }
    }

    let mut remap = vec![u32::MAX; n_comp];
    let mut next = 0u32;
    let mut out = vec![0u32; n];
    for p in 0..n {
        let g = find(&mut parent, comp[p]);
        if remap[g] == u32::MAX {
            remap[g] = next;
            next += 1;
        }
        out[p] = remap[g];
    }
    out
}
