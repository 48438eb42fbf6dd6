//! Local refinement of a diffusion operator: drop the constant eigenvector,
//! cut the spectrum at the eigengap, filter weakly discriminative
//! eigenvectors, then re-synthesize with a per-seed affine normalization.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::ColorSpace;
use crate::spectral::{normalized_variance, SpectralDecomposition, SINGULAR_EIGENVALUE};

pub const DEFAULT_VAR_THRESHOLD: f64 = 0.05;
pub const DEFAULT_SCALED_VAR_THRESHOLD: f64 = 300.0;
pub const DEFAULT_L_MAX: usize = 30;

/// How eigenvector discriminability is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum VarianceMode {
    /// `N * var(u)` for unit-norm `u`, in [0, 1].
    #[default]
    UnitNorm,
    /// Population variance after min-max scaling `u` to [0, 255].
    Scaled255,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineParams {
    pub var_threshold: f64,
    pub l_max: usize,
    pub variance_mode: VarianceMode,
}

impl Default for RefineParams {
    fn default() -> Self {
        Self {
            var_threshold: DEFAULT_VAR_THRESHOLD,
            l_max: DEFAULT_L_MAX,
            variance_mode: VarianceMode::UnitNorm,
        }
    }
}

impl RefineParams {
    pub fn discriminability(&self, u: &[f64]) -> f64 {
        match self.variance_mode {
            VarianceMode::UnitNorm => normalized_variance(u),
            VarianceMode::Scaled255 => scaled_variance(u),
        }
    }
}

fn scaled_variance(u: &[f64]) -> f64 {
    let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    if !(hi > lo) {
        return 0.0;
    }
    let n = u.len() as f64;
    let scaled: Vec<f64> = u.iter().map(|v| (v - lo) / (hi - lo) * 255.0).collect();
    let mean = scaled.iter().sum::<f64>() / n;
    scaled.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// A re-synthesized operator `U_bar diag(1/lambda_bar) U_bar^T`.
#[derive(Debug, Clone)]
pub struct RefinedDiffusion {
    kept_indices: Vec<usize>,
    u_bar: DMatrix<f64>,
    lambda_bar: DVector<f64>,
    source: Option<(ColorSpace, f64)>,
    eigengap_position: usize,
}

impl RefinedDiffusion {
    /// Builds an operator from explicit eigenpairs; every `lambda` must be
    /// positive.
    pub fn from_parts(u_bar: DMatrix<f64>, lambda_bar: DVector<f64>) -> Result<Self> {
        if u_bar.ncols() != lambda_bar.len() || u_bar.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} eigenvectors but {} eigenvalues",
                u_bar.ncols(),
                lambda_bar.len()
            )));
        }
        if let Some((index, &value)) = lambda_bar.iter().enumerate().find(|(_, &v)| !(v > SINGULAR_EIGENVALUE)) {
            return Err(Error::SingularEigenvalue { index, value });
        }
        let k = u_bar.ncols();
        Ok(Self {
            kept_indices: (0..k).collect(),
            u_bar,
            lambda_bar,
            source: None,
            eigengap_position: k + 1,
        })
    }

    pub fn with_source(mut self, space: ColorSpace, sigma2: f64) -> Self {
        self.source = Some((space, sigma2));
        self
    }

    /// 0-based eigen indices that survived refinement.
    pub fn kept_indices(&self) -> &[usize] {
        &self.kept_indices
    }

    pub fn u_bar(&self) -> &DMatrix<f64> {
        &self.u_bar
    }

    pub fn lambda_bar(&self) -> &DVector<f64> {
        &self.lambda_bar
    }

    pub fn source(&self) -> Option<(ColorSpace, f64)> {
        self.source
    }

    /// 1-based eigengap position `r`.
    pub fn eigengap_position(&self) -> usize {
        self.eigengap_position
    }

    pub fn n(&self) -> usize {
        self.u_bar.nrows()
    }

    pub fn k(&self) -> usize {
        self.u_bar.ncols()
    }

    /// `U_bar diag(1/lambda_bar) U_bar^T s`.
    pub fn apply(&self, seed: &DVector<f64>) -> DVector<f64> {
        let coeffs = (self.u_bar.transpose() * seed).component_div(&self.lambda_bar);
        &self.u_bar * coeffs
    }

    /// The dense N×N operator.
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut scaled = self.u_bar.clone();
        for (l, mut col) in scaled.column_iter_mut().enumerate() {
            col /= self.lambda_bar[l];
        }
        scaled * self.u_bar.transpose()
    }
}

/// Position `r` (1-based) of the largest gap `lambda_l - lambda_{l-1}` for
/// `2 <= l <= l_max`. If that is `r = 2`, which would leave nothing once the
/// constant eigenvector is dropped, the second-largest gap is used. When the
/// spectrum carries no usable gap the returned `r` keeps every searched
/// eigenvector (`min(l_max, n) + 1`). Ties go to the smaller `l`.
pub fn find_eigengap(eigenvalues: &[f64], l_max: usize) -> usize {
    let n = eigenvalues.len();
    let upper = l_max.min(n).max(2);
    let keep_all = upper + 1;
    if n < 2 {
        return keep_all;
    }
    let scale = eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let negligible = 1e-12 * scale;
    let gaps: Vec<(usize, f64)> = (2..=upper)
        .map(|l| (l, eigenvalues[l - 1] - eigenvalues[l - 2]))
        .collect();
    let argmax = |skip: Option<usize>| {
        gaps.iter()
            .filter(|(l, _)| Some(*l) != skip)
            .fold(None::<(usize, f64)>, |best, &(l, g)| match best {
                Some((_, bg)) if bg >= g => best,
                _ => Some((l, g)),
            })
    };
    match argmax(None) {
        None => keep_all,
        Some((_, g)) if g <= negligible => keep_all,
        Some((r, _)) if r != 2 => r,
        Some(_) => match argmax(Some(2)) {
            Some((r, g)) if g > negligible => r,
            _ => keep_all,
        },
    }
}

pub fn refine_matrix(dec: &SpectralDecomposition, params: &RefineParams) -> Result<RefinedDiffusion> {
    let n = dec.n();
    if n < 2 {
        return Err(Error::DegenerateGraph("need at least two nodes to refine".into()));
    }
    let r = find_eigengap(dec.eigenvalues().as_slice(), params.l_max);
    let constant = dec.constant_index();
    // 1-based l in [2, r-1] is 0-based [1, r-2].
    let candidates: Vec<usize> = (1..(r - 1).min(n)).filter(|&l| l != constant).collect();
    let disc: Vec<(usize, f64)> = candidates
        .iter()
        .map(|&l| (l, params.discriminability(dec.eigenvectors().column(l).as_slice())))
        .collect();
    let mut kept: Vec<usize> = disc
        .iter()
        .filter(|(_, d)| *d >= params.var_threshold)
        .map(|(l, _)| *l)
        .collect();
    if kept.is_empty() {
        let fallback = disc
            .iter()
            .fold(None::<(usize, f64)>, |best, &(l, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((l, d)),
            })
            .map(|(l, _)| l)
            .unwrap_or_else(|| if constant == 0 { 1 } else { 0 });
        kept.push(fallback);
    }
    let u_bar = DMatrix::from_fn(n, kept.len(), |i, c| dec.eigenvectors()[(i, kept[c])]);
    let lambda_bar = DVector::from_iterator(kept.len(), kept.iter().map(|&l| dec.eigenvalues()[l]));
    if let Some((index, &value)) = lambda_bar.iter().enumerate().find(|(_, &v)| !(v > SINGULAR_EIGENVALUE)) {
        return Err(Error::SingularEigenvalue {
            index: kept[index],
            value,
        });
    }
    Ok(RefinedDiffusion {
        kept_indices: kept,
        u_bar,
        lambda_bar,
        source: None,
        eigengap_position: r,
    })
}

/// Nonnegative, finite and not all zero.
pub(crate) fn check_seed(seed: &DVector<f64>, n: usize) -> Result<()> {
    if seed.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "seed has {} entries, expected {n}",
            seed.len()
        )));
    }
    if let Some(i) = seed.iter().position(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidSeed(i));
    }
    if seed.iter().all(|&v| v == 0.0) {
        return Err(Error::EmptySeed);
    }
    Ok(())
}

/// A refined operator with the constant eigenvector re-added at eigenvalue
/// `lambda1_prime` and the rest scaled by `1 / a_hat`, tuned for one seed.
#[derive(Debug, Clone)]
pub struct NormalizedDiffusion<'a> {
    pub refined: &'a RefinedDiffusion,
    /// `None` when the constant term vanishes (`p = 0`) or the output is
    /// degenerate.
    pub lambda1_prime: Option<f64>,
    /// `None` when the refined output is constant.
    pub a_hat: Option<f64>,
}

impl NormalizedDiffusion<'_> {
    /// Dense `lambda1'^-1 u1 u1^T + a_hat^-1 U_bar diag(1/lambda_bar) U_bar^T`
    /// with `u1` the unit constant vector. Degenerate normalizations have no
    /// matrix form.
    pub fn matrix(&self) -> Option<DMatrix<f64>> {
        let a_hat = self.a_hat?;
        let n = self.refined.n();
        let mut m = self.refined.matrix() / a_hat;
        if let Some(l1) = self.lambda1_prime {
            m.add_scalar_mut(1.0 / (l1 * n as f64));
        }
        Some(m)
    }
}

/// Affinely maps `y_bar = U_bar diag(1/lambda_bar) U_bar^T s` onto [0, 1]
/// through the constant-eigenvector term. A constant `y_bar` maps to 0.5.
pub fn normalize_for_seed<'a>(
    refined: &'a RefinedDiffusion,
    seed: &DVector<f64>,
) -> Result<(NormalizedDiffusion<'a>, DVector<f64>)> {
    let n = refined.n();
    check_seed(seed, n)?;
    let y_bar = refined.apply(seed);
    let p = y_bar.min();
    let q = y_bar.max();
    let scale = p.abs().max(q.abs());
    if !(q - p > 1e-12 * scale) {
        let nd = NormalizedDiffusion {
            refined,
            lambda1_prime: None,
            a_hat: None,
        };
        return Ok((nd, DVector::from_element(n, 0.5)));
    }
    let a_hat = q - p;
    let b = p / (p - q);
    let seed_sum = seed.sum();
    // u1 u1^T s with unit u1 is (sum s / N) 1; choose lambda1' so it equals b 1.
    let lambda1_prime = (b != 0.0).then(|| seed_sum / (n as f64 * b));
    let constant_term = lambda1_prime.map_or(0.0, |l1| seed_sum / (n as f64 * l1));
    let y_hat = y_bar.map(|v| constant_term + v / a_hat);
    Ok((
        NormalizedDiffusion {
            refined,
            lambda1_prime,
            a_hat: Some(a_hat),
        },
        y_hat,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{laplacians, SaliencyGraph};
    use crate::spectral::decompose;

    #[test]
    fn unique_largest_gap() {
        assert_eq!(find_eigengap(&[0.01, 0.02, 0.03, 0.9, 0.95], 5), 4);
    }

    #[test]
    fn gap_at_two_falls_back_to_second_largest() {
        // Gaps 0.89, 0.01, 0.01, 0.03: the runner-up sits at l = 5.
        assert_eq!(find_eigengap(&[0.01, 0.9, 0.91, 0.92, 0.95], 5), 5);
    }

    #[test]
    fn flat_spectrum_keeps_everything() {
        assert_eq!(find_eigengap(&[0.3; 6], 30), 7);
        assert_eq!(find_eigengap(&[0.3; 6], 4), 5);
    }

    #[test]
    fn l_max_bounds_the_search() {
        let eig = [0.01, 0.02, 0.05, 0.06, 1.5];
        assert_eq!(find_eigengap(&eig, 5), 5);
        assert_eq!(find_eigengap(&eig, 4), 3);
    }

    fn two_cluster_graph() -> SaliencyGraph {
        let mut w = DMatrix::zeros(10, 10);
        for i in 0..10 {
            for j in 0..10 {
                w[(i, j)] = if i == j {
                    1.0
                } else if i / 5 == j / 5 {
                    0.9
                } else {
                    0.01
                };
            }
        }
        SaliencyGraph::from_weights(w).unwrap()
    }

    #[test]
    fn clean_two_cluster_graph_keeps_the_indicator() {
        let g = two_cluster_graph();
        let dec = decompose(&laplacians(&g).l_rw_tilde, Some(g.degree())).unwrap();
        let refined = refine_matrix(&dec, &RefineParams::default()).unwrap();
        assert_eq!(refined.eigengap_position(), 3);
        assert_eq!(refined.kept_indices(), &[1]);
        let u2 = refined.u_bar().column(0);
        let first = u2[0].signum();
        assert!((0..5).all(|i| u2[i].signum() == first));
        assert!((5..10).all(|i| u2[i].signum() == -first));
    }

    #[test]
    fn threshold_zero_keeps_all_before_gap() {
        let g = two_cluster_graph();
        let dec = decompose(&laplacians(&g).l_rw_tilde, Some(g.degree())).unwrap();
        let params = RefineParams {
            var_threshold: 0.0,
            l_max: 10,
            ..RefineParams::default()
        };
        let refined = refine_matrix(&dec, &params).unwrap();
        let r = refined.eigengap_position();
        assert_eq!(refined.kept_indices(), (1..r - 1).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn impossible_threshold_keeps_most_variable_vector() {
        let g = two_cluster_graph();
        let dec = decompose(&laplacians(&g).l_rw_tilde, Some(g.degree())).unwrap();
        let params = RefineParams {
            var_threshold: 2.0,
            l_max: 10,
            ..RefineParams::default()
        };
        let refined = refine_matrix(&dec, &params).unwrap();
        assert_eq!(refined.k(), 1);
        let r = refined.eigengap_position();
        let best = (1..r - 1)
            .max_by(|&a, &b| {
                normalized_variance(dec.eigenvectors().column(a).as_slice())
                    .total_cmp(&normalized_variance(dec.eigenvectors().column(b).as_slice()))
            })
            .unwrap();
        assert_eq!(refined.kept_indices(), &[best]);
    }

    #[test]
    fn normalization_endpoints() {
        // One eigenvector, unit eigenvalue, seed = e1 + 2 e2 gives y_bar = u (u . s).
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let refined = RefinedDiffusion::from_parts(u, DVector::from_element(1, 1.0)).unwrap();
        let seed = DVector::from_vec(vec![0.0, 0.4]);
        // y_bar = [0.8, 1.6]
        let (nd, y) = normalize_for_seed(&refined, &seed).unwrap();
        assert!((y[0] - 0.0).abs() < 1e-15 && (y[1] - 1.0).abs() < 1e-15);
        assert!((nd.a_hat.unwrap() - 0.8).abs() < 1e-15);
        let m = nd.matrix().unwrap();
        assert!((&m * &seed - &y).norm() < 1e-12);
    }

    #[test]
    fn constant_output_maps_to_half() {
        let u = DMatrix::from_element(3, 1, 1.0);
        let refined = RefinedDiffusion::from_parts(u, DVector::from_element(1, 2.0)).unwrap();
        let (nd, y) = normalize_for_seed(&refined, &DVector::from_element(3, 1.0)).unwrap();
        assert!(y.iter().all(|&v| v == 0.5));
        assert!(nd.a_hat.is_none());
    }

    #[test]
    fn zero_minimum_drops_constant_term() {
        let u = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let refined = RefinedDiffusion::from_parts(u, DVector::from_element(1, 1.0)).unwrap();
        let (nd, y) = normalize_for_seed(&refined, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(nd.lambda1_prime.is_none());
        assert_eq!(y.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn empty_and_negative_seeds_are_rejected() {
        let refined =
            RefinedDiffusion::from_parts(DMatrix::from_element(2, 1, 1.0), DVector::from_element(1, 1.0)).unwrap();
        assert!(matches!(
            normalize_for_seed(&refined, &DVector::zeros(2)),
            Err(Error::EmptySeed)
        ));
        assert!(matches!(
            normalize_for_seed(&refined, &DVector::from_vec(vec![1.0, -0.1])),
            Err(Error::InvalidSeed(1))
        ));
    }
}
