//! Eigendecomposition of diffusion operators and diffusion maps.
//!
//! Random-walk Laplacians `D^-1 M` (with `M` symmetric) are not symmetric,
//! but they are similar to `D^-1/2 M D^-1/2`. We decompose that symmetric
//! matrix and map its eigenvectors back with `D^-1/2`. Re-synthesis always
//! uses the literal `U diag(1/lambda) U^T` form.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{SaliencyGraph, DAMPING};

/// Eigenvalues at or below this are treated as singular.
pub const SINGULAR_EIGENVALUE: f64 = 1e-12;

/// Eigenvalues closer than this share an eigenspace.
const DEGENERATE_GAP: f64 = 1e-10;

const EIGEN_MAX_ITER: usize = 10_000;

/// Eigenvector scaling for random-walk operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EigvecNorm {
    /// Unit Euclidean norm.
    #[default]
    Euclidean,
    /// `u^T D u = 1`.
    DOrthonormal,
}

#[derive(Debug, Clone)]
pub struct SpectralDecomposition {
    eigenvalues: DVector<f64>,
    eigenvectors: DMatrix<f64>,
    constant_index: usize,
}

impl SpectralDecomposition {
    /// Ascending.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Column `l` pairs with `eigenvalues()[l]`.
    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    /// Index of the (near-)constant eigenvector, normally 0.
    pub fn constant_index(&self) -> usize {
        self.constant_index
    }

    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `||A u_l - lambda_l u_l||_2`.
    pub fn residual(&self, a: &DMatrix<f64>, l: usize) -> f64 {
        let u = self.eigenvectors.column(l);
        (a * u - u * self.eigenvalues[l]).norm()
    }

    /// `U diag(1/lambda) U^T`.
    pub fn resynthesize(&self) -> Result<DMatrix<f64>> {
        let inv = self.inverse_eigenvalues()?;
        let mut scaled = self.eigenvectors.clone();
        for (l, mut col) in scaled.column_iter_mut().enumerate() {
            col *= inv[l];
        }
        Ok(scaled * self.eigenvectors.transpose())
    }

    fn inverse_eigenvalues(&self) -> Result<DVector<f64>> {
        if let Some((index, &value)) = self
            .eigenvalues
            .iter()
            .enumerate()
            .find(|(_, &v)| v <= SINGULAR_EIGENVALUE)
        {
            return Err(Error::SingularEigenvalue { index, value });
        }
        Ok(self.eigenvalues.map(|v| 1.0 / v))
    }
}

/// Decomposes a diffusion operator.
///
/// With `degree = Some(d)`, `a_matrix` is taken to be `D^-1 M` for a
/// symmetric `M` and eigenvectors are Euclidean-normalized. With `None`,
/// `a_matrix` itself must be symmetric.
pub fn decompose(a_matrix: &DMatrix<f64>, degree: Option<&DVector<f64>>) -> Result<SpectralDecomposition> {
    decompose_with(a_matrix, degree, EigvecNorm::Euclidean)
}

pub fn decompose_with(
    a_matrix: &DMatrix<f64>,
    degree: Option<&DVector<f64>>,
    norm: EigvecNorm,
) -> Result<SpectralDecomposition> {
    let n = a_matrix.nrows();
    if a_matrix.ncols() != n || n == 0 {
        return Err(Error::ShapeMismatch("operator must be square and nonempty".into()));
    }
    if a_matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure("operator has non-finite entries".into()));
    }
    let (sym, inv_sqrt_d) = match degree {
        Some(d) => {
            if d.len() != n {
                return Err(Error::ShapeMismatch(format!(
                    "degree has {} entries, operator is {n}x{n}",
                    d.len()
                )));
            }
            if d.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::DegenerateGraph("nonpositive degree".into()));
            }
            let sqrt_d = d.map(f64::sqrt);
            // D^1/2 A D^-1/2
            let mut s = a_matrix.clone();
            for i in 0..n {
                for j in 0..n {
                    s[(i, j)] *= sqrt_d[i] / sqrt_d[j];
                }
            }
            (s, Some(sqrt_d.map(|v| 1.0 / v)))
        }
        None => (a_matrix.clone(), None),
    };
    let sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::try_new(sym, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::NumericalFailure(format!("symmetric eigensolver did not converge (n = {n})")))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(isd) = &inv_sqrt_d {
            col.component_mul_assign(isd);
        }
        vectors.set_column(dst, &col);
    }

    // Inner product used to orthonormalize within eigenspaces.
    let weight = match (norm, degree) {
        (EigvecNorm::DOrthonormal, Some(d)) => d.clone(),
        _ => DVector::from_element(n, 1.0),
    };
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && eigenvalues[end] - eigenvalues[end - 1] < DEGENERATE_GAP {
            end += 1;
        }
        if start == 0 && end - start > 1 {
            align_with_constant(&mut vectors, start, end, &weight);
        }
        orthonormalize(&mut vectors, start, end, &weight);
        start = end;
    }
    for mut col in vectors.column_iter_mut() {
        fix_sign(col.as_mut_slice());
    }

    let constant_index = (0..n)
        .map(|l| (l, normalized_variance(vectors.column(l).as_slice())))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(l, _)| l)
        .unwrap_or(0);

    Ok(SpectralDecomposition {
        eigenvalues,
        eigenvectors: vectors,
        constant_index,
    })
}

fn weighted_dot(a: &[f64], b: &[f64], w: &DVector<f64>) -> f64 {
    a.iter().zip(b).zip(w.iter()).map(|((x, y), z)| x * y * z).sum()
}

/// Puts the projection of the constant vector first in a degenerate
/// lowest eigenspace so the constant direction stays identifiable.
fn align_with_constant(v: &mut DMatrix<f64>, start: usize, end: usize, w: &DVector<f64>) {
    let n = v.nrows();
    let ones = vec![1.0; n];
    // Orthonormal basis of the block first so the projection is well defined.
    orthonormalize(v, start, end, w);
    let mut proj = DVector::zeros(n);
    for l in start..end {
        let col = v.column(l).into_owned();
        proj += &col * weighted_dot(col.as_slice(), &ones, w);
    }
    if proj.norm() > 1e-8 {
        // Swap in the projection and let Gram-Schmidt clean up the rest.
        let mut best = start;
        let mut best_overlap = 0.0;
        for l in start..end {
            let o = weighted_dot(v.column(l).as_slice(), proj.as_slice(), w).abs();
            if o > best_overlap {
                best_overlap = o;
                best = l;
            }
        }
        v.swap_columns(start, best);
        v.set_column(start, &proj);
    }
}

/// Modified Gram-Schmidt on columns `start..end` under the `w`-weighted inner product.
fn orthonormalize(v: &mut DMatrix<f64>, start: usize, end: usize, w: &DVector<f64>) {
    for l in start..end {
        let mut col = v.column(l).into_owned();
        for k in start..l {
            let prev = v.column(k).into_owned();
            let c = weighted_dot(col.as_slice(), prev.as_slice(), w);
            col -= prev * c;
        }
        let nrm = weighted_dot(col.as_slice(), col.as_slice(), w).sqrt();
        if nrm > 0.0 {
            col /= nrm;
        }
        v.set_column(l, &col);
    }
}

/// Flips `u` so that its largest-magnitude entry (first on ties) is positive.
pub(crate) fn fix_sign(u: &mut [f64]) {
    let max = u.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 {
        return;
    }
    let pivot = u
        .iter()
        .position(|v| v.abs() >= max * (1.0 - 1e-9))
        .expect("max is attained");
    if u[pivot] < 0.0 {
        u.iter_mut().for_each(|v| *v = -*v);
    }
}

/// `N * var(u / ||u||)`, in [0, 1]: one minus the squared cosine between
/// `u` and the constant direction.
pub fn normalized_variance(u: &[f64]) -> f64 {
    let n = u.len() as f64;
    let sq: f64 = u.iter().map(|v| v * v).sum();
    if sq == 0.0 {
        return 0.0;
    }
    let s: f64 = u.iter().sum();
    (1.0 - s * s / (n * sq)).max(0.0)
}

/// Per-node diffusion maps `Psi_i = [lambda_l^-1/2 u_l(i)]_l`, stored as rows.
#[derive(Debug, Clone)]
pub struct DiffusionMap {
    psi: DMatrix<f64>,
}

impl DiffusionMap {
    pub fn new(dec: &SpectralDecomposition) -> Result<Self> {
        let inv = dec.inverse_eigenvalues()?;
        let mut psi = dec.eigenvectors.clone();
        for (l, mut col) in psi.column_iter_mut().enumerate() {
            col *= inv[l].sqrt();
        }
        Ok(Self { psi })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.psi
    }

    pub fn inner(&self, i: usize, j: usize) -> f64 {
        self.psi.row(i).dot(&self.psi.row(j))
    }

    /// `y_i = sum_j s_j <Psi_i, Psi_j>`.
    pub fn apply(&self, seed: &DVector<f64>) -> DVector<f64> {
        &self.psi * (self.psi.transpose() * seed)
    }
}

/// `U diag(1/lambda) U^T s` without forming the N×N product.
pub fn diffusion_apply(dec: &SpectralDecomposition, seed: &DVector<f64>) -> Result<DVector<f64>> {
    if seed.len() != dec.n() {
        return Err(Error::ShapeMismatch(format!(
            "seed has {} entries, operator has {} nodes",
            seed.len(),
            dec.n()
        )));
    }
    let inv = dec.inverse_eigenvalues()?;
    let coeffs = (dec.eigenvectors.transpose() * seed).component_mul(&inv);
    Ok(&dec.eigenvectors * coeffs)
}

/// Truncated series `sum_{k < n_terms} (0.99 D^-1 W)^k x`; equals
/// `(I - 0.99 P)^-1 x` in the limit.
pub fn neumann_check(g: &SaliencyGraph, x: &DVector<f64>, n_terms: usize) -> DVector<f64> {
    let p = g.transition() * DAMPING;
    let mut term = x.clone();
    let mut sum = DVector::zeros(x.len());
    for k in 0..n_terms {
        if k > 0 {
            term = &p * term;
        }
        sum += &term;
    }
    sum
}
