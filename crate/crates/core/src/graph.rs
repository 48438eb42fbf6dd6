//! Close-loop two-hop superpixel graph and its Laplacians.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ColorSpace;
use crate::superpixel::SuperpixelSegmentation;

/// Damping applied to W in the invertible Laplacian variants.
pub const DAMPING: f64 = 0.99;

/// How the feature distance enters the edge-weight exponent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DistanceMode {
    /// `exp(-||vi - vj|| / sigma2)`
    #[default]
    Euclidean,
    /// `exp(-||vi - vj||^2 / sigma2)`
    Squared,
}

#[derive(Debug, Clone)]
pub struct SaliencyGraph {
    n: usize,
    edges: BTreeSet<(usize, usize)>,
    w: DMatrix<f64>,
    degree: DVector<f64>,
    space: Option<ColorSpace>,
    sigma2: f64,
}

impl SaliencyGraph {
    /// Wraps an explicit affinity matrix. It must be symmetric and
    /// nonnegative with a positive degree for every node.
    pub fn from_weights(w: DMatrix<f64>) -> Result<Self> {
        let n = w.nrows();
        if w.ncols() != n || n == 0 {
            return Err(Error::ShapeMismatch(
                "affinity matrix must be square and nonempty".into(),
            ));
        }
        let mut edges = BTreeSet::new();
        for i in 0..n {
            for j in 0..n {
                let v = w[(i, j)];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(Error::InvalidParameter(format!("w[{i},{j}] = {v}")));
                }
                if (v - w[(j, i)]).abs() > 1e-12 * v.abs().max(1.0) {
                    return Err(Error::InvalidParameter("affinity matrix is not symmetric".into()));
                }
                if i < j && v > 0.0 {
                    edges.insert((i, j));
                }
            }
        }
        let degree = DVector::from_iterator(n, w.row_iter().map(|r| r.sum()));
        if let Some(i) = degree.iter().position(|&d| !(d > 0.0)) {
            return Err(Error::DegenerateGraph(format!("node {i} has zero degree")));
        }
        Ok(Self {
            n,
            edges,
            w,
            degree,
            space: None,
            sigma2: f64::NAN,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Unordered edges as `(i, j)` with `i < j`.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn w_matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    pub fn space(&self) -> Option<ColorSpace> {
        self.space
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    /// Row-stochastic transition matrix `D^-1 W`.
    pub fn transition(&self) -> DMatrix<f64> {
        let mut p = self.w.clone();
        for (i, mut row) in p.row_iter_mut().enumerate() {
            row /= self.degree[i];
        }
        p
    }

    /// `D - damping * W`.
    pub fn damped_laplacian(&self, damping: f64) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.degree) - &self.w * damping
    }

    /// `D^-1 (D - damping * W)`.
    pub fn damped_rw_laplacian(&self, damping: f64) -> DMatrix<f64> {
        let mut m = self.damped_laplacian(damping);
        for (i, mut row) in m.row_iter_mut().enumerate() {
            row /= self.degree[i];
        }
        m
    }
}

/// Edge set of the close-loop graph: spatial 1-hop and 2-hop neighbors plus
/// every pair of border nodes.
pub fn graph_edges(seg: &SuperpixelSegmentation) -> BTreeSet<(usize, usize)> {
    let adj = seg.adjacency();
    let mut edges = BTreeSet::new();
    let mut add = |a: usize, b: usize| {
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    };
    for (i, nbrs) in adj.iter().enumerate() {
        for &j in nbrs {
            add(i, j);
            for &k in &adj[j] {
                add(i, k);
            }
        }
    }
    let border: Vec<usize> = (0..seg.n_nodes()).filter(|&i| seg.is_border()[i]).collect();
    for (a, &i) in border.iter().enumerate() {
        for &j in &border[a + 1..] {
            add(i, j);
        }
    }
    edges
}

pub fn build_graph(seg: &SuperpixelSegmentation, space: ColorSpace, sigma2: f64) -> Result<SaliencyGraph> {
    build_graph_with(seg, space, sigma2, DistanceMode::Euclidean)
}

pub fn build_graph_with(
    seg: &SuperpixelSegmentation,
    space: ColorSpace,
    sigma2: f64,
    mode: DistanceMode,
) -> Result<SaliencyGraph> {
    if !(sigma2 > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma2 must be positive, got {sigma2}"
        )));
    }
    let n = seg.n_nodes();
    let feats = seg.mean_feature(space);
    let edges = graph_edges(seg);
    let mut w = DMatrix::identity(n, n);
    for &(i, j) in &edges {
        let d2: f64 = (0..3).map(|k| (feats[i][k] - feats[j][k]).powi(2)).sum();
        let d = match mode {
            DistanceMode::Euclidean => d2.sqrt(),
            DistanceMode::Squared => d2,
        };
        // Underflow to exactly zero would silently drop the edge.
        let v = (-d / sigma2).exp().max(f64::MIN_POSITIVE);
        w[(i, j)] = v;
        w[(j, i)] = v;
    }
    let degree = DVector::from_iterator(n, w.row_iter().map(|r| r.sum()));
    Ok(SaliencyGraph {
        n,
        edges,
        w,
        degree,
        space: Some(space),
        sigma2,
    })
}

#[derive(Debug, Clone)]
pub struct Laplacians {
    /// `D - W`
    pub l: DMatrix<f64>,
    /// `D^-1 (D - W)`
    pub l_rw: DMatrix<f64>,
    /// `D - 0.99 W`
    pub l_tilde: DMatrix<f64>,
    /// `D^-1 (D - 0.99 W)`
    pub l_rw_tilde: DMatrix<f64>,
}

pub fn laplacians(g: &SaliencyGraph) -> Laplacians {
    Laplacians {
        l: g.damped_laplacian(1.0),
        l_rw: g.damped_rw_laplacian(1.0),
        l_tilde: g.damped_laplacian(DAMPING),
        l_rw_tilde: g.damped_rw_laplacian(DAMPING),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::ImageSample;
    use image::{Rgb, RgbImage};

    fn grid_segmentation(colors: &[[u8; 3]; 9]) -> SuperpixelSegmentation {
        // 9x9 image, 3x3 blocks of 3x3 pixels.
        let mut img = RgbImage::new(9, 9);
        let mut labels = vec![0u32; 81];
        for r in 0..9 {
            for c in 0..9 {
                let id = (r / 3) * 3 + c / 3;
                labels[r * 9 + c] = id as u32;
                img.put_pixel(c as u32, r as u32, Rgb(colors[id]));
            }
        }
        let s = ImageSample::new("grid", img, None).unwrap();
        SuperpixelSegmentation::from_labels(&s, labels).unwrap()
    }

    #[test]
    fn identical_features_have_unit_weight() {
        let seg = grid_segmentation(&[[10, 10, 10]; 9]);
        let g = build_graph(&seg, ColorSpace::Rgb, 10.0).unwrap();
        for &(i, j) in g.edges() {
            assert_eq!(g.w_matrix()[(i, j)], 1.0);
        }
        for i in 0..9 {
            assert_eq!(g.w_matrix()[(i, i)], 1.0);
        }
    }

    #[test]
    fn distance_equal_to_sigma2_gives_inverse_e() {
        let mut colors = [[0, 0, 0]; 9];
        colors[1] = [10, 0, 0];
        let seg = grid_segmentation(&colors);
        let g = build_graph(&seg, ColorSpace::Rgb, 10.0).unwrap();
        assert!((g.w_matrix()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
        let sq = build_graph_with(&seg, ColorSpace::Rgb, 100.0, DistanceMode::Squared).unwrap();
        assert!((sq.w_matrix()[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn grid_adjacency_matches_enumeration() {
        let seg = grid_segmentation(&[[0, 0, 0]; 9]);
        let edges = graph_edges(&seg);
        // Brute force: 4-adjacent blocks, their two-hop closure, border clique.
        let pos = |i: usize| ((i / 3) as i32, (i % 3) as i32);
        let adj = |a: usize, b: usize| {
            let (ra, ca) = pos(a);
            let (rb, cb) = pos(b);
            (ra - rb).abs() + (ca - cb).abs() == 1
        };
        let border = |i: usize| i != 4;
        let mut expect = BTreeSet::new();
        for a in 0..9 {
            for b in (a + 1)..9 {
                let two_hop = (0..9).any(|k| adj(a, k) && adj(k, b));
                if adj(a, b) || two_hop || (border(a) && border(b)) {
                    expect.insert((a, b));
                }
            }
        }
        assert_eq!(edges, expect);
        // Opposite corners are far apart spatially but linked via the border.
        assert!(edges.contains(&(0, 8)) && edges.contains(&(2, 6)));
    }

    #[test]
    fn two_node_laplacians() {
        let g = SaliencyGraph::from_weights(DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let lap = laplacians(&g);
        assert_eq!(lap.l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert_eq!(lap.l_rw, DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]));
    }

    #[test]
    fn rejects_asymmetric_weights() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(SaliencyGraph::from_weights(w).is_err());
    }
}
